/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_scene_free: (a: number, b: number) => void;
export const __wbg_view_free: (a: number, b: number) => void;
export const scene_depth: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
export const scene_flow: (a: number, b: number, c: number, d: number) => [number, number, number];
export const scene_height: (a: number) => number;
export const scene_new: (a: number) => [number, number, number];
export const scene_sampson: (a: number, b: number) => [number, number, number];
export const scene_width: (a: number) => number;
export const view_rgba: (a: number) => [number, number];
export const view_summary: (a: number) => [number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
