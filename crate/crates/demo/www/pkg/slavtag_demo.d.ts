/* tslint:disable */
/* eslint-disable */

export class Tagger {
    private constructor();
    free(): void;
    [Symbol.dispose](): void;
    static fromCheckpoint(bytes: Uint8Array, vocab: string): Tagger;
    samples(): string;
    summary(): string;
    tag(text: string, nbest: number): string;
    static trainDemo(seed: number, sentences: number, epochs: number): Tagger;
}

export function exploreCrf(request: string): string;

export function randomLattice(seed: number, len: number, labels: number): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_tagger_free: (a: number, b: number) => void;
    readonly exploreCrf: (a: number, b: number) => [number, number, number, number];
    readonly randomLattice: (a: number, b: number, c: number) => [number, number];
    readonly tagger_fromCheckpoint: (a: number, b: number, c: number, d: number) => [number, number, number];
    readonly tagger_samples: (a: number) => [number, number];
    readonly tagger_summary: (a: number) => [number, number];
    readonly tagger_tag: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly tagger_trainDemo: (a: number, b: number, c: number) => [number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_start: () => void;
}

export type SyncInitInput = BufferSource | WebAssembly.Module;

/**
 * Instantiates the given `module`, which can either be bytes or
 * a precompiled `WebAssembly.Module`.
 *
 * @param {{ module: SyncInitInput }} module - Passing `SyncInitInput` directly is deprecated.
 *
 * @returns {InitOutput}
 */
export function initSync(module: { module: SyncInitInput } | SyncInitInput): InitOutput;

/**
 * If `module_or_path` is {RequestInfo} or {URL}, makes a request and
 * for everything else, calls `WebAssembly.instantiate` directly.
 *
 * @param {{ module_or_path: InitInput | Promise<InitInput> }} module_or_path - Passing `InitInput` directly is deprecated.
 *
 * @returns {Promise<InitOutput>}
 */
export default function __wbg_init (module_or_path?: { module_or_path: InitInput | Promise<InitInput> } | InitInput | Promise<InitInput>): Promise<InitOutput>;
