/* tslint:disable */
/* eslint-disable */

/**
 * Interactive heat-equation training run.
 */
export class HeatSession {
    free(): void;
    [Symbol.dispose](): void;
    /**
     * Category labels in the order of `losses` and `weights`.
     */
    categories(): string[];
    epoch(): number;
    losses(): Float64Array;
    /**
     * `method` is any method name accepted by the CLI; `width` is the size of
     * both hidden layers.
     */
    constructor(method: string, seed: bigint, n_interior: number, width: number);
    /**
     * Flattened `[x, model, exact]` triples of `u`, `u_xx` or `u_t` at time `t`.
     */
    profile(deriv: string, t: number, n: number): Float64Array;
    /**
     * Runs `n` epochs and returns the objective of the last one.
     */
    step(n: number): number;
    weights(): Float64Array;
}

/**
 * Flattened `[K, sigma, C, C_K, C_KK]` rows of the reference surface at
 * maturity `t` for local volatility `sigma_a + a/K + b t`.
 */
export function local_vol_slice(sigma_a: number, a: number, b: number, t: number, n: number): Float64Array;

/**
 * Flattened `[K, mc, bs, stderr]` rows for constant volatility `sigma`.
 */
export function mc_vs_bs(sigma: number, maturity: number, n_strikes: number, n_paths: number, seed: bigint): Float64Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_heatsession_free: (a: number, b: number) => void;
    readonly heatsession_categories: (a: number) => [number, number];
    readonly heatsession_epoch: (a: number) => number;
    readonly heatsession_losses: (a: number) => [number, number];
    readonly heatsession_new: (a: number, b: number, c: bigint, d: number, e: number) => [number, number, number];
    readonly heatsession_profile: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly heatsession_step: (a: number, b: number) => [number, number, number];
    readonly heatsession_weights: (a: number) => [number, number];
    readonly local_vol_slice: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly mc_vs_bs: (a: number, b: number, c: number, d: number, e: bigint) => [number, number, number, number];
    readonly __externref_table_alloc: () => number;
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __externref_drop_slice: (a: number, b: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
    readonly __externref_table_dealloc: (a: number) => void;
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
