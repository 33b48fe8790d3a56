use wasm_bindgen::prelude::*;

fn js(e: String) -> JsError {
    JsError::new(&e)
}

#[wasm_bindgen(js_name = randomLattice)]
pub fn random_lattice(seed: u32, len: usize, labels: usize) -> String {
    crate::random_lattice(seed as u64, len, labels)
}

#[wasm_bindgen(js_name = exploreCrf)]
pub fn explore_crf(request: &str) -> Result<String, JsError> {
    crate::explore_crf(request).map_err(js)
}

#[wasm_bindgen]
pub struct Tagger(crate::Tagger);

#[wasm_bindgen]
impl Tagger {
    #[wasm_bindgen(js_name = trainDemo)]
    pub fn train_demo(seed: u32, sentences: usize, epochs: usize) -> Result<Tagger, JsError> {
        crate::Tagger::train_demo(seed as u64, sentences, epochs).map(Tagger).map_err(js)
    }

    #[wasm_bindgen(js_name = fromCheckpoint)]
    pub fn from_checkpoint(bytes: &[u8], vocab: &str) -> Result<Tagger, JsError> {
        crate::Tagger::from_checkpoint(bytes, vocab).map(Tagger).map_err(js)
    }

    pub fn samples(&self) -> String {
        self.0.samples()
    }

    pub fn summary(&self) -> String {
        self.0.summary()
    }

    pub fn tag(&self, text: &str, nbest: usize) -> Result<String, JsError> {
        self.0.tag(text, nbest).map_err(js)
    }
}
