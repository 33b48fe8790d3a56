/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_tagger_free: (a: number, b: number) => void;
export const exploreCrf: (a: number, b: number) => [number, number, number, number];
export const randomLattice: (a: number, b: number, c: number) => [number, number];
export const tagger_fromCheckpoint: (a: number, b: number, c: number, d: number) => [number, number, number];
export const tagger_samples: (a: number) => [number, number];
export const tagger_summary: (a: number) => [number, number];
export const tagger_tag: (a: number, b: number, c: number, d: number) => [number, number, number, number];
export const tagger_trainDemo: (a: number, b: number, c: number) => [number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
