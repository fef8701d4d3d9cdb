/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_sanitizestages_free: (a: number, b: number) => void;
export const sanitizeUpdate: (a: number, b: number, c: number, d: number, e: number, f: number, g: number, h: number, i: number, j: number) => [number, number, number];
export const sanitizestages_bound: (a: number) => number;
export const sanitizestages_clipFactor: (a: number) => number;
export const sanitizestages_clipped: (a: number) => [number, number];
export const sanitizestages_noiseScale: (a: number) => number;
export const sanitizestages_noised: (a: number) => [number, number];
export const sanitizestages_sparse: (a: number) => [number, number];
export const thresholdCurve: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
export const trainFederation: (a: number, b: number, c: number, d: number, e: number, f: number, g: number) => [number, number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
