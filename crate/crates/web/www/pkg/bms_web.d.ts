/* tslint:disable */
/* eslint-disable */

/**
 * Fault, vote and batching bounds for a system of `size` members.
 */
export function batching_bounds(size: number): string;

/**
 * Size sweep under `policy` (`"t1"` or `"halff"`): per-join update gas and mean join latencies.
 */
export function gas_sweep(policy: string, from: number, to: number, seed: bigint): string;

/**
 * Long-range attack runs against a client that reads the membership service (`"bms"`) or not (`"control"`).
 */
export function long_range_attack(mode: string, seeds: bigint): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly batching_bounds: (a: number) => [number, number, number, number];
    readonly gas_sweep: (a: number, b: number, c: number, d: number, e: bigint) => [number, number, number, number];
    readonly long_range_attack: (a: number, b: number, c: bigint) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
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
