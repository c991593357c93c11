/**
 * Filesystem IO for tfjs LayersModel artifacts (model.json + weight shards).
 *
 * Plain @tensorflow/tfjs has no Node file handlers of its own; this is the
 * minimal pair needed to load and save the standard checkpoint layout.
 */

import * as fs from 'node:fs';
import * as path from 'node:path';
import * as tf from '@tensorflow/tfjs';

function toArrayBuffer(data: ArrayBuffer | ArrayBuffer[] | undefined): ArrayBuffer {
    if (data === undefined) {
        throw new Error('model artifacts carry no weight data');
    }
    const parts = Array.isArray(data) ? data : [data];
    const total = parts.reduce((n, p) => n + p.byteLength, 0);
    const out = new Uint8Array(total);
    let offset = 0;
    for (const p of parts) {
        out.set(new Uint8Array(p), offset);
        offset += p.byteLength;
    }
    return out.buffer;
}

/** Load handler for an on-disk model.json and its weight shards. */
export function fileLoadHandler(modelJsonPath: string): tf.io.IOHandler {
    return {
        async load(): Promise<tf.io.ModelArtifacts> {
            const dir = path.dirname(modelJsonPath);
            const json = JSON.parse(fs.readFileSync(modelJsonPath, 'utf8'));
            const specs: tf.io.WeightsManifestEntry[] = [];
            const buffers: Buffer[] = [];
            for (const group of json.weightsManifest ?? []) {
                specs.push(...group.weights);
                for (const rel of group.paths) {
                    buffers.push(fs.readFileSync(path.join(dir, rel)));
                }
            }
            const blob = Buffer.concat(buffers);
            return {
                modelTopology: json.modelTopology,
                format: json.format,
                generatedBy: json.generatedBy,
                weightSpecs: specs,
                weightData: blob.buffer.slice(
                    blob.byteOffset, blob.byteOffset + blob.byteLength),
            };
        },
    };
}

/** Save handler writing model.json plus a single weights shard. */
export function fileSaveHandler(modelJsonPath: string): tf.io.IOHandler {
    return {
        async save(artifacts: tf.io.ModelArtifacts): Promise<tf.io.SaveResult> {
            const dir = path.dirname(modelJsonPath);
            fs.mkdirSync(dir, { recursive: true });
            const shard = 'weights.bin';
            const blob = toArrayBuffer(
                artifacts.weightData as ArrayBuffer | ArrayBuffer[]);
            fs.writeFileSync(path.join(dir, shard), Buffer.from(blob));
            const json = {
                modelTopology: artifacts.modelTopology,
                format: artifacts.format ?? 'layers-model',
                generatedBy: artifacts.generatedBy ?? 'prunekit-export',
                convertedBy: null,
                weightsManifest: [
                    { paths: [shard], weights: artifacts.weightSpecs },
                ],
            };
            fs.writeFileSync(modelJsonPath, JSON.stringify(json));
            return {
                modelArtifactsInfo: {
                    dateSaved: new Date(),
                    modelTopologyType: 'JSON',
                },
            };
        },
    };
}

export async function loadSourceModel(modelJsonPath: string): Promise<tf.LayersModel> {
    if (!fs.existsSync(modelJsonPath)) {
        throw new Error(`no model.json at ${modelJsonPath}`);
    }
    return tf.loadLayersModel(fileLoadHandler(modelJsonPath));
}

export async function saveSourceModel(model: tf.LayersModel,
                                      modelJsonPath: string): Promise<void> {
    await model.save(fileSaveHandler(modelJsonPath));
}
