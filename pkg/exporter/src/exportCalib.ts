/**
 * Converts recorded calibration batches into the engine's dataset format.
 *
 * Source recordings are channels-last: batch.json (count, height, width,
 * channels, num_classes) beside inputs.bin (float32 [N,H,W,C]) and
 * labels.bin (uint32). Samples are drawn without replacement by a seeded
 * PRNG so the same (n, seed) always selects the same subset, and pixels are
 * transposed to the engine's [N,C,H,W] order lane-by-lane.
 */

import * as fs from 'node:fs';
import * as path from 'node:path';

import { writeDatasetDir } from './format';

export const BATCH_META_NAME = 'batch.json';
export const BATCH_INPUTS_NAME = 'inputs.bin';
export const BATCH_LABELS_NAME = 'labels.bin';

export interface SourceBatch {
    count: number;
    height: number;
    width: number;
    channels: number;
    numClasses: number;
    /** float32 [N,H,W,C] */
    inputs: Float32Array;
    labels: Uint32Array;
}

export function readSourceBatch(dir: string): SourceBatch {
    const meta = JSON.parse(
        fs.readFileSync(path.join(dir, BATCH_META_NAME), 'utf8'));
    const count = meta.count as number;
    const h = meta.height as number;
    const w = meta.width as number;
    const c = meta.channels as number;
    const raw = fs.readFileSync(path.join(dir, BATCH_INPUTS_NAME));
    const want = 4 * count * h * w * c;
    if (raw.length !== want) {
        throw new Error(
            `${BATCH_INPUTS_NAME} holds ${raw.length} bytes, expected ${want}`);
    }
    const rawLabels = fs.readFileSync(path.join(dir, BATCH_LABELS_NAME));
    if (rawLabels.length !== 4 * count) {
        throw new Error(
            `${BATCH_LABELS_NAME} holds ${rawLabels.length} bytes, ` +
            `expected ${4 * count}`);
    }
    return {
        count,
        height: h,
        width: w,
        channels: c,
        numClasses: meta.num_classes as number,
        inputs: new Float32Array(raw.buffer, raw.byteOffset,
                                 count * h * w * c),
        labels: new Uint32Array(rawLabels.buffer, rawLabels.byteOffset, count),
    };
}

function mulberry32(seed: number): () => number {
    let a = seed >>> 0;
    return () => {
        a = (a + 0x6d2b79f5) >>> 0;
        let t = a;
        t = Math.imul(t ^ (t >>> 15), t | 1);
        t ^= t + Math.imul(t ^ (t >>> 7), t | 61);
        return ((t ^ (t >>> 14)) >>> 0) / 4294967296;
    };
}

/** First n of a seeded Fisher-Yates shuffle; deterministic in (count, n, seed). */
export function selectIndices(count: number, n: number, seed: number): number[] {
    if (n < 1) {
        throw new Error(`n must be >= 1, got ${n}`);
    }
    if (n > count) {
        throw new Error(`requested n=${n} exceeds dataset size ${count}`);
    }
    const rng = mulberry32(seed);
    const pool = Array.from({ length: count }, (_, i) => i);
    const picked: number[] = [];
    for (let i = 0; i < n; i++) {
        const j = i + Math.floor(rng() * (count - i));
        [pool[i], pool[j]] = [pool[j], pool[i]];
        picked.push(pool[i]);
    }
    return picked;
}

function nhwcToNchw(src: Float32Array, indices: number[], h: number,
                    w: number, c: number): Float32Array {
    const per = h * w * c;
    const out = new Float32Array(indices.length * per);
    const si = new Uint32Array(src.buffer, src.byteOffset, src.length);
    const di = new Uint32Array(out.buffer);
    for (let s = 0; s < indices.length; s++) {
        const base = indices[s] * per;
        const dst = s * per;
        for (let hh = 0; hh < h; hh++) {
            for (let ww = 0; ww < w; ww++) {
                for (let cc = 0; cc < c; cc++) {
                    di[dst + (cc * h + hh) * w + ww] =
                        si[base + (hh * w + ww) * c + cc];
                }
            }
        }
    }
    return out;
}

export interface CalibResult {
    count: number;
    indices: number[];
}

/** Select n samples by seed and write an engine dataset directory. */
export function exportCalibration(srcDir: string, outDir: string, n: number,
                                  seed = 0): CalibResult {
    const batch = readSourceBatch(srcDir);
    const indices = selectIndices(batch.count, n, seed);
    const labels = new Uint32Array(n);
    for (let i = 0; i < n; i++) {
        labels[i] = batch.labels[indices[i]];
    }
    writeDatasetDir(outDir, {
        data: nhwcToNchw(batch.inputs, indices, batch.height, batch.width,
                         batch.channels),
        labels,
        sampleShape: [batch.channels, batch.height, batch.width],
        numClasses: batch.numClasses,
    });
    return { count: n, indices };
}
