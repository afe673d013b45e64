/* tslint:disable */
/* eslint-disable */

/**
 * One synthetic video held in memory for frame-by-frame display.
 */
export class SyntheticViewer {
    free(): void;
    [Symbol.dispose](): void;
    /**
     * Frame `index` as RGBA bytes (values clamped to [0, 1] before scaling).
     */
    frame_rgba(index: number): Uint8Array;
    is_empty(): boolean;
    /**
     * Frame `index` labels: 1 active, 0 inactive, −1 unannotated.
     */
    labels(index: number): Int8Array;
    len(): number;
    /**
     * Generates the first video of the default synthetic set with the given seed and noise level.
     */
    constructor(seed: bigint, noise_std: number);
    /**
     * Frame side length in pixels.
     */
    size(): number;
}

/**
 * Names of the 12 action units, in label order.
 */
export function au_names(): string[];

/**
 * Focal loss of a positive entry at `points` evenly spaced probabilities in (0, 1).
 *
 * By symmetry the curve for a negative entry at probability `p` is this curve
 * at `1 − p` with `alpha` replaced by `1 − alpha`.
 */
export function focal_curve(alpha: number, gamma: number, points: number): Float64Array;

/**
 * Learning rate at each of the first `steps` optimizer steps.
 */
export function lr_schedule(eta_min: number, eta_max: number, t_0: number, t_mult: number, steps: number): Float64Array;

/**
 * Steps (1-based count of completed steps) after which the schedule restarts.
 */
export function restart_steps(t_0: number, t_mult: number, steps: number): Uint32Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_syntheticviewer_free: (a: number, b: number) => void;
    readonly au_names: () => [number, number];
    readonly focal_curve: (a: number, b: number, c: number) => [number, number, number, number];
    readonly lr_schedule: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly restart_steps: (a: number, b: number, c: number) => [number, number, number, number];
    readonly syntheticviewer_frame_rgba: (a: number, b: number) => [number, number, number, number];
    readonly syntheticviewer_is_empty: (a: number) => number;
    readonly syntheticviewer_labels: (a: number, b: number) => [number, number, number, number];
    readonly syntheticviewer_len: (a: number) => number;
    readonly syntheticviewer_new: (a: bigint, b: number) => [number, number, number];
    readonly syntheticviewer_size: (a: number) => number;
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __externref_drop_slice: (a: number, b: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
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
