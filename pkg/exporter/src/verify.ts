/**
 * Numerical round-trip check: source-framework forward vs engine forward.
 *
 * The engine side runs through the `prunekit forward` CLI, which dumps raw
 * float32 logits; the tfjs side predicts on the same batch read back from
 * the exported dataset directory. Reported deviation is the max absolute
 * difference over every logit.
 */

import { spawnSync } from 'node:child_process';
import * as fs from 'node:fs';
import * as os from 'node:os';
import * as path from 'node:path';
import * as tf from '@tensorflow/tfjs';

import { DATA_NAME, META_NAME } from './format';
import { loadSourceModel } from './io';

export const PARITY_THRESHOLD = 1e-4;

export class EngineError extends Error {}

export interface ParityReport {
    maxAbsDeviation: number;
    threshold: number;
    count: number;
    pass: boolean;
}

interface EngineDataset {
    /** float32 [N,C,H,W] */
    data: Float32Array;
    count: number;
    shape: [number, number, number];
}

function readEngineDataset(dir: string): EngineDataset {
    const meta = JSON.parse(
        fs.readFileSync(path.join(dir, META_NAME), 'utf8'));
    const raw = fs.readFileSync(path.join(dir, DATA_NAME));
    const shape = meta.shape as [number, number, number];
    const count = meta.count as number;
    return {
        data: new Float32Array(raw.buffer, raw.byteOffset, raw.length / 4),
        count,
        shape,
    };
}

function toChannelsLast(ds: EngineDataset): tf.Tensor4D {
    const [c, h, w] = ds.shape;
    const per = c * h * w;
    const out = new Float32Array(ds.data.length);
    for (let s = 0; s < ds.count; s++) {
        const base = s * per;
        for (let cc = 0; cc < c; cc++) {
            for (let hh = 0; hh < h; hh++) {
                for (let ww = 0; ww < w; ww++) {
                    out[base + (hh * w + ww) * c + cc] =
                        ds.data[base + (cc * h + hh) * w + ww];
                }
            }
        }
    }
    return tf.tensor4d(out, [ds.count, h, w, c]);
}

function engineLogits(engineBin: string, modelDir: string,
                      calibDir: string): Float32Array {
    const tempDir = fs.mkdtempSync(path.join(os.tmpdir(), 'prunekit-export-'));
    const logitsPath = path.join(tempDir, 'logits.bin');
    try {
        const run = spawnSync(engineBin,
                              ['forward', modelDir, calibDir,
                               '--logits-out', logitsPath],
                              { encoding: 'utf8' });
        if (run.error) {
            throw new EngineError(
                `failed to run ${engineBin}: ${run.error.message}`);
        }
        if (run.status !== 0) {
            throw new EngineError(
                `${engineBin} forward exited with ${run.status}: ` +
                `${(run.stderr || run.stdout).trim()}`);
        }
        const raw = fs.readFileSync(logitsPath);
        return new Float32Array(raw.buffer, raw.byteOffset, raw.length / 4);
    } finally {
        fs.rmSync(tempDir, { recursive: true, force: true });
    }
}

export interface VerifyOptions {
    engineBin?: string;
    threshold?: number;
}

/**
 * Forward the batch through both sides and report the max abs deviation.
 * A deviation above the threshold is a verification failure (pass=false);
 * an unloadable export surfaces as EngineError.
 */
export async function verifyParity(modelJsonPath: string, exportedDir: string,
                                   calibDir: string,
                                   options: VerifyOptions = {},
                                   ): Promise<ParityReport> {
    const engineBin = options.engineBin
        ?? process.env.PRUNEKIT_BIN ?? 'prunekit';
    const threshold = options.threshold ?? PARITY_THRESHOLD;

    const ds = readEngineDataset(calibDir);
    const model = await loadSourceModel(modelJsonPath);
    const input = toChannelsLast(ds);
    const predicted = model.predict(input, { batchSize: ds.count });
    const sourceLogits = (predicted as tf.Tensor).dataSync() as Float32Array;
    input.dispose();
    (predicted as tf.Tensor).dispose();

    const engine = engineLogits(engineBin, exportedDir, calibDir);
    if (engine.length !== sourceLogits.length) {
        throw new EngineError(
            `engine produced ${engine.length} logits, ` +
            `source produced ${sourceLogits.length}`);
    }
    let dev = 0;
    for (let i = 0; i < engine.length; i++) {
        const d = Math.abs(engine[i] - sourceLogits[i]);
        if (d > dev) {
            dev = d;
        }
    }
    return {
        maxAbsDeviation: dev,
        threshold,
        count: ds.count,
        pass: dev <= threshold,
    };
}
