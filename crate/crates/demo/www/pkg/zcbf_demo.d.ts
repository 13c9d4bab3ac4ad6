/* tslint:disable */
/* eslint-disable */

/**
 * Split of a follower pair offset along the line through its two leaders.
 * `points` is `[x_k, x_j, x_lk, x_lj]` flattened, two coordinates each.
 */
export function ff_geometry(points: Float64Array, d_max: number, eps: number): string;

/**
 * Objective of a two-input safety filter with one constraint
 * `c0 + Σ min(lo_c (u_c - a_c), hi_c (u_c - a_c)) ≥ rhs`, sampled on a grid,
 * plus the filter's own solution.
 */
export function filter_landscape(u_nom: Float64Array, c0: number, anchor: Float64Array, slope_lo: Float64Array, slope_hi: Float64Array, rhs: number, rho: number, bound: number, n: number): string;

/**
 * Closed-loop run of a bundled case. `bounds` is `"data"` (generate and fit
 * with the given seed and dataset size), `"oracle"` (exact local gradients)
 * or `"none"` (nominal controller only).
 */
export function simulate(_case: string, bounds: string, seed: number, n_sims: number, scale: number): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly ff_geometry: (a: number, b: number, c: number, d: number) => [number, number];
    readonly filter_landscape: (a: number, b: number, c: number, d: number, e: number, f: number, g: number, h: number, i: number, j: number, k: number, l: number, m: number) => [number, number];
    readonly simulate: (a: number, b: number, c: number, d: number, e: number, f: number, g: number) => [number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
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
