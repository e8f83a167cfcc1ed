/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_heatsession_free: (a: number, b: number) => void;
export const heatsession_categories: (a: number) => [number, number];
export const heatsession_epoch: (a: number) => number;
export const heatsession_losses: (a: number) => [number, number];
export const heatsession_new: (a: number, b: number, c: bigint, d: number, e: number) => [number, number, number];
export const heatsession_profile: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
export const heatsession_step: (a: number, b: number) => [number, number, number];
export const heatsession_weights: (a: number) => [number, number];
export const local_vol_slice: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
export const mc_vs_bs: (a: number, b: number, c: number, d: number, e: bigint) => [number, number, number, number];
export const __externref_table_alloc: () => number;
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_drop_slice: (a: number, b: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_start: () => void;
