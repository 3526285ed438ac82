/* tslint:disable */
/* eslint-disable */

/**
 * Row-softmaxed attention of a freshly initialised one-layer encoder on
 * `text`, one matrix per head.
 */
export function attention_pattern(scheme: string, text: string, seed: number): string;

/**
 * Rows are offsets `-max_delta..=max_delta`, columns the `d_z` components.
 */
export function frpe_heatmap(max_delta: number, d_z: number): string;

/**
 * Masking plan for `text` under `strategy`, with `lexicon` holding
 * whitespace-separated words. `rate_scale` multiplies the default rates.
 */
export function masking_plan(text: string, lexicon: string, strategy: string, rate_scale: number, seed: number): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly attention_pattern: (a: number, b: number, c: number, d: number, e: number) => [number, number];
    readonly frpe_heatmap: (a: number, b: number) => [number, number];
    readonly masking_plan: (a: number, b: number, c: number, d: number, e: number, f: number, g: number, h: number) => [number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
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
