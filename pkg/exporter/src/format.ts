/**
 * Writers for the engine's on-disk model and dataset directory formats.
 *
 * A model directory holds manifest.json plus weights.bin: every parameter
 * tensor is float32 little-endian, addressed by (offset, shape) and guarded
 * by a CRC32. A dataset directory holds data.bin (float32 [N,C,H,W]),
 * labels.bin (uint32) and meta.json. Both formats round-trip bit-exactly.
 */

import * as fs from 'node:fs';
import * as path from 'node:path';
import { crc32 } from 'node:zlib';

export const FORMAT_TAG = 'prunekit-model/1';
export const MANIFEST_NAME = 'manifest.json';
export const WEIGHTS_NAME = 'weights.bin';
export const DATA_NAME = 'data.bin';
export const LABELS_NAME = 'labels.bin';
export const META_NAME = 'meta.json';

export interface ParamEntry {
    shape: number[];
    offset: number;
    crc32: number;
}

export interface NodeJson {
    id: string;
    kind: string;
    attrs: Record<string, number>;
    params: Record<string, ParamEntry>;
}

export type Edge = [string, string, number];

export interface ModelManifest {
    format: string;
    name: string;
    input_shape: number[];
    num_classes: number;
    nodes: NodeJson[];
    edges: Edge[];
}

/** One layer plus its parameter tensors, pre-serialization. */
export interface GraphNode {
    id: string;
    kind: string;
    attrs: Record<string, number>;
    params: Record<string, { shape: number[]; data: Float32Array }>;
}

export interface EngineGraph {
    name: string;
    inputShape: number[];
    numClasses: number;
    nodes: GraphNode[];
    edges: Edge[];
}

const LITTLE_ENDIAN =
    new Uint8Array(new Uint32Array([1]).buffer)[0] === 1;

/** Raw little-endian bytes of a float32 array, preserving bit patterns. */
export function float32Bytes(arr: Float32Array): Buffer {
    if (LITTLE_ENDIAN) {
        return Buffer.from(arr.buffer, arr.byteOffset, arr.byteLength);
    }
    const out = Buffer.alloc(arr.byteLength);
    const lanes = new Uint32Array(arr.buffer, arr.byteOffset, arr.length);
    for (let i = 0; i < lanes.length; i++) {
        out.writeUInt32LE(lanes[i], 4 * i);
    }
    return out;
}

export function uint32Bytes(arr: Uint32Array): Buffer {
    if (LITTLE_ENDIAN) {
        return Buffer.from(arr.buffer, arr.byteOffset, arr.byteLength);
    }
    const out = Buffer.alloc(arr.byteLength);
    for (let i = 0; i < arr.length; i++) {
        out.writeUInt32LE(arr[i], 4 * i);
    }
    return out;
}

export function writeModelDir(dir: string, graph: EngineGraph): void {
    fs.mkdirSync(dir, { recursive: true });
    const chunks: Buffer[] = [];
    let offset = 0;
    const nodesJson: NodeJson[] = [];
    for (const node of graph.nodes) {
        const paramsJson: Record<string, ParamEntry> = {};
        for (const pname of Object.keys(node.params).sort()) {
            const { shape, data } = node.params[pname];
            const raw = float32Bytes(data);
            paramsJson[pname] = {
                shape,
                offset,
                crc32: crc32(raw) >>> 0,
            };
            chunks.push(raw);
            offset += raw.length;
        }
        nodesJson.push({
            id: node.id,
            kind: node.kind,
            attrs: node.attrs,
            params: paramsJson,
        });
    }
    const manifest: ModelManifest = {
        format: FORMAT_TAG,
        name: graph.name,
        input_shape: graph.inputShape,
        num_classes: graph.numClasses,
        nodes: nodesJson,
        edges: graph.edges,
    };
    fs.writeFileSync(path.join(dir, MANIFEST_NAME),
                     JSON.stringify(manifest, null, 1));
    fs.writeFileSync(path.join(dir, WEIGHTS_NAME), Buffer.concat(chunks));
}

export interface DatasetDir {
    /** float32 sample data already in [N,C,H,W] order */
    data: Float32Array;
    labels: Uint32Array;
    sampleShape: [number, number, number];
    numClasses: number;
}

export function writeDatasetDir(dir: string, ds: DatasetDir): void {
    const count = ds.labels.length;
    const per = ds.sampleShape[0] * ds.sampleShape[1] * ds.sampleShape[2];
    if (ds.data.length !== count * per) {
        throw new Error(
            `dataset data holds ${ds.data.length} floats, ` +
            `expected ${count * per}`);
    }
    fs.mkdirSync(dir, { recursive: true });
    fs.writeFileSync(path.join(dir, DATA_NAME), float32Bytes(ds.data));
    fs.writeFileSync(path.join(dir, LABELS_NAME), uint32Bytes(ds.labels));
    const meta = {
        shape: ds.sampleShape,
        num_classes: ds.numClasses,
        count,
    };
    fs.writeFileSync(path.join(dir, META_NAME),
                     JSON.stringify(meta, null, 1));
}

export function readModelManifest(dir: string): ModelManifest {
    return JSON.parse(
        fs.readFileSync(path.join(dir, MANIFEST_NAME), 'utf8'));
}

export function readWeightsBlob(dir: string): Buffer {
    return fs.readFileSync(path.join(dir, WEIGHTS_NAME));
}
