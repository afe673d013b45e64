/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_syntheticviewer_free: (a: number, b: number) => void;
export const au_names: () => [number, number];
export const focal_curve: (a: number, b: number, c: number) => [number, number, number, number];
export const lr_schedule: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
export const restart_steps: (a: number, b: number, c: number) => [number, number, number, number];
export const syntheticviewer_frame_rgba: (a: number, b: number) => [number, number, number, number];
export const syntheticviewer_is_empty: (a: number) => number;
export const syntheticviewer_labels: (a: number, b: number) => [number, number, number, number];
export const syntheticviewer_len: (a: number) => number;
export const syntheticviewer_new: (a: bigint, b: number) => [number, number, number];
export const syntheticviewer_size: (a: number) => number;
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_drop_slice: (a: number, b: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_start: () => void;
