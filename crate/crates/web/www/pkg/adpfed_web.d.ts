/* tslint:disable */
/* eslint-disable */

/**
 * Every stage of one sanitized update.
 */
export class SanitizeStages {
    private constructor();
    free(): void;
    [Symbol.dispose](): void;
    /**
     * gamma in adaptive mode, C in static mode, 0 when non-private.
     */
    readonly bound: number;
    readonly clipFactor: number;
    readonly clipped: Float64Array;
    readonly noiseScale: number;
    readonly noised: Float64Array;
    readonly sparse: Float64Array;
}

/**
 * Runs one update through sparsification, clipping and noise.
 *
 * `threshold` is only read in static mode.
 */
export function sanitizeUpdate(update: Float64Array, mode: string, q: number, p: number, epsilon: number, sigma: number, threshold: number, seed: number): SanitizeStages;

/**
 * Adaptive threshold of the top-q sparsified update at each percentile.
 */
export function thresholdCurve(update: Float64Array, q: number, percentiles: Float64Array): Float64Array;

/**
 * Trains a small federation and returns the mean validation Dice after
 * every round, followed by the test Dice of the best-validation model.
 */
export function trainFederation(mode: string, rounds: number, epsilon: number, p: number, lr: number, seed: number): Float64Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_sanitizestages_free: (a: number, b: number) => void;
    readonly sanitizeUpdate: (a: number, b: number, c: number, d: number, e: number, f: number, g: number, h: number, i: number, j: number) => [number, number, number];
    readonly sanitizestages_bound: (a: number) => number;
    readonly sanitizestages_clipFactor: (a: number) => number;
    readonly sanitizestages_clipped: (a: number) => [number, number];
    readonly sanitizestages_noiseScale: (a: number) => number;
    readonly sanitizestages_noised: (a: number) => [number, number];
    readonly sanitizestages_sparse: (a: number) => [number, number];
    readonly thresholdCurve: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly trainFederation: (a: number, b: number, c: number, d: number, e: number, f: number, g: number) => [number, number, number, number];
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
