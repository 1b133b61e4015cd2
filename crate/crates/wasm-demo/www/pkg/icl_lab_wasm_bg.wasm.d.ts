/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const os_overthinking: (a: number, b: number, c: number, d: number, e: number, f: number, g: number, h: number) => [number, number];
export const sft_error_vs_b: (a: number, b: number, c: number, d: number, e: number, f: number, g: number, h: number, i: number, j: number) => [number, number];
export const theory_curve: (a: number, b: number, c: number, d: number, e: number, f: number, g: number) => [number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
