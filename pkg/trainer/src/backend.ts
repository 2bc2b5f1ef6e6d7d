/**
 * Backend selection: prefer the wasm kernels (much faster than the plain JS
 * cpu backend), pinned to one thread so repeated runs stay bit-identical;
 * fall back to cpu when wasm is unavailable.
 */

import { createRequire } from 'module';
import * as path from 'path';
import * as tf from '@tensorflow/tfjs';

let initialized: Promise<string> | null = null;

export function initBackend(): Promise<string> {
    if (initialized === null) {
        initialized = (async () => {
            try {
                const wasm = await import('@tensorflow/tfjs-backend-wasm');
                const require = createRequire(import.meta.url);
                const wasmBinary = require.resolve(
                    '@tensorflow/tfjs-backend-wasm/dist/tfjs-backend-wasm.wasm',
                );
                wasm.setWasmPaths(path.dirname(wasmBinary) + path.sep);
                wasm.setThreadsCount(1);
                const ok = await tf.setBackend('wasm');
                if (!ok) throw new Error('setBackend(wasm) returned false');
            } catch {
                await tf.setBackend('cpu');
            }
            await tf.ready();
            return tf.getBackend();
        })();
    }
    return initialized;
}
