import init, { randomLattice, exploreCrf, Tagger } from "./pkg/slavtag_demo.js";

const $ = (id) => document.getElementById(id);
let tagger = null;

function fail(target, e) {
  target.innerHTML = "";
  const p = document.createElement("p");
  p.className = "error";
  p.textContent = String(e && e.message ? e.message : e);
  target.appendChild(p);
}

function table(head, rows) {
  const t = document.createElement("table");
  const tr = t.insertRow();
  for (const h of head) {
    const th = document.createElement("th");
    th.textContent = h;
    tr.appendChild(th);
  }
  for (const r of rows) {
    const row = t.insertRow();
    for (const v of r) row.insertCell().textContent = v;
  }
  return t;
}

const fmt = (x) => (Math.abs(x) >= 1000 ? x.toExponential(3) : x.toFixed(4));

function newLattice() {
  const json = randomLattice(+$("lat-seed").value, +$("lat-len").value, +$("lat-k").value);
  $("lat-json").value = JSON.stringify(JSON.parse(json), null, 1);
}

function decode() {
  const out = $("lat-out");
  try {
    const req = JSON.parse($("lat-json").value);
    req.n = +$("lat-n").value;
    const res = JSON.parse(exploreCrf(JSON.stringify(req)));
    out.innerHTML = "";
    const p = document.createElement("p");
    p.textContent = `log Z = ${fmt(res.log_partition)}`;
    out.appendChild(p);
    out.appendChild(table(["rank", "score", "P(path)", "labels"],
      res.paths.map((x, i) => [i + 1, fmt(x.score), fmt(x.probability), x.labels.join(" ")])));
    out.appendChild(table(["position", ...req.labels],
      res.marginals.map((row, t) => [t, ...row.map(fmt)])));
  } catch (e) {
    fail(out, e);
  }
}

function showModel() {
  const s = JSON.parse(tagger.summary());
  $("model-info").textContent =
    `${s.parameters} parameters, BiLSTM ${s.lstm_hidden}×2, ${s.heads} heads, ` +
    `embeddings ${s.embeddings}, languages ${s.languages.join(" ")}` +
    (s.language_head ? "" : " (no language head)");
  const samples = JSON.parse(tagger.samples());
  const span = $("samples");
  span.innerHTML = "";
  for (const [lang, text] of Object.entries(samples)) {
    const b = document.createElement("button");
    b.textContent = lang;
    b.onclick = () => { $("tag-text").value = text; };
    span.appendChild(b);
  }
  const first = Object.values(samples)[0];
  if (first) $("tag-text").value = first;
  $("tag-run").disabled = false;
}

function trainDemo() {
  $("model-info").textContent = "training…";
  // Let the message paint before the blocking call.
  setTimeout(() => {
    try {
      const t0 = performance.now();
      tagger = Tagger.trainDemo(+$("tr-seed").value, +$("tr-sent").value, +$("tr-epochs").value);
      showModel();
      $("model-info").textContent += `; trained in ${((performance.now() - t0) / 1000).toFixed(1)} s`;
    } catch (e) {
      fail($("model-info"), e);
    }
  }, 20);
}

async function loadCheckpoint() {
  try {
    const [ck, vocab] = [$("ck-file").files[0], $("ck-vocab").files[0]];
    if (!ck || !vocab) throw new Error("choose a checkpoint and a vocabulary file");
    const bytes = new Uint8Array(await ck.arrayBuffer());
    tagger = Tagger.fromCheckpoint(bytes, await vocab.text());
    showModel();
  } catch (e) {
    fail($("model-info"), e);
  }
}

function tag() {
  const out = $("tag-out");
  try {
    const res = JSON.parse(tagger.tag($("tag-text").value, +$("tag-n").value));
    out.innerHTML = "";
    for (const s of res.sentences) {
      const div = document.createElement("div");
      s.words.forEach((w, i) => {
        const span = document.createElement("span");
        const label = s.labels[i];
        span.className = "tok " + (label === "O" ? "" : label.slice(2));
        span.textContent = w;
        const small = document.createElement("small");
        small.textContent = label;
        span.appendChild(small);
        div.appendChild(span);
      });
      if (s.language) {
        const best = s.language.reduce((a, b) => (b[1] > a[1] ? b : a));
        const p = document.createElement("small");
        p.textContent = ` language ${best[0]} (${best[1].toFixed(3)})`;
        div.appendChild(p);
      }
      out.appendChild(div);
      out.appendChild(table(["rank", "score", ...s.subtokens],
        s.nbest.map((p, i) => [i + 1, fmt(p.score), ...p.labels])));
    }
    const pre = document.createElement("pre");
    pre.textContent = res.entities || "(no entities)";
    if (res.unknown_subtokens) pre.textContent += `\n${res.unknown_subtokens} unknown subtokens`;
    out.appendChild(pre);
  } catch (e) {
    fail(out, e);
  }
}

await init();
$("lat-random").onclick = () => { newLattice(); decode(); };
$("lat-decode").onclick = decode;
$("tr-train").onclick = trainDemo;
$("ck-load").onclick = loadCheckpoint;
$("tag-run").onclick = tag;
newLattice();
decode();
$("status").textContent = "ready";
