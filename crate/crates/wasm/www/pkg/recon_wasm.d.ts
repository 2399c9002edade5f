/* tslint:disable */
/* eslint-disable */

export class Scene {
    free(): void;
    [Symbol.dispose](): void;
    /**
     * JSON report of depth metrics and the scale/shift-invariant loss.
     */
    depth(scale: number, shift: number, noise: number, seed: number): string;
    flow(dx: number, dy: number, dz: number): View;
    height(): number;
    constructor(seed: number);
    sampson(beta: number): View;
    width(): number;
}

/**
 * An RGBA frame plus a JSON summary, handed to JavaScript in one object.
 */
export class View {
    private constructor();
    free(): void;
    [Symbol.dispose](): void;
    /**
     * Copies the pixels into a `Uint8ClampedArray`-compatible buffer.
     */
    rgba(): Uint8Array;
    summary(): string;
}

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_scene_free: (a: number, b: number) => void;
    readonly __wbg_view_free: (a: number, b: number) => void;
    readonly scene_depth: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly scene_flow: (a: number, b: number, c: number, d: number) => [number, number, number];
    readonly scene_height: (a: number) => number;
    readonly scene_new: (a: number) => [number, number, number];
    readonly scene_sampson: (a: number, b: number) => [number, number, number];
    readonly scene_width: (a: number) => number;
    readonly view_rgba: (a: number) => [number, number];
    readonly view_summary: (a: number) => [number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
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
