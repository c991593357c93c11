/**
 * Maps a tfjs LayersModel onto the engine's layer graph and writes the
 * model directory.
 *
 * Layout bridging: tfjs is channels-last, the engine channels-first. Conv
 * kernels [kH,kW,inC,outC] become [outC,inC,kH,kW]; dense kernels
 * [inF,units] become [units,inF]; a dense fed by a flatten additionally
 * permutes its input columns from (h,w,c) flat order to (c,h,w). All
 * transposes move whole 4-byte lanes so float32 bit patterns are preserved
 * exactly.
 */

import * as tf from '@tensorflow/tfjs';

import { Edge, EngineGraph, GraphNode, writeModelDir } from './format';
import { loadSourceModel } from './io';

/** Architectures are checked against the engine's closed op set up front. */
export class UnsupportedModuleError extends Error {
    readonly unsupported: UnsupportedEntry[];

    constructor(entries: UnsupportedEntry[]) {
        const what = entries
            .map((e) => `${e.layer} (${e.className}): ${e.reason}`)
            .join('; ');
        super(`unsupported module${entries.length > 1 ? 's' : ''}: ${what}`);
        this.unsupported = entries;
    }
}

export interface UnsupportedEntry {
    layer: string;
    className: string;
    reason: string;
}

export interface ExportEntry {
    source: string;
    kind: string;
    /** engine param name -> source weight name */
    params: Record<string, string>;
}

export interface ExportMap {
    entries: ExportEntry[];
    unsupported: UnsupportedEntry[];
}

export interface ExportOptions {
    name?: string;
    /** Skip unsupported shape-preserving layers instead of aborting. */
    skipValidate?: boolean;
}

type Shape =
    | { kind: 'image'; h: number; w: number; c: number }
    | { kind: 'vector'; n: number };

function lanes(arr: Float32Array): Uint32Array {
    return new Uint32Array(arr.buffer, arr.byteOffset, arr.length);
}

function convKernelToEngine(src: Float32Array, k: number,
                            cIn: number, cOut: number): Float32Array {
    const out = new Float32Array(src.length);
    const si = lanes(src);
    const di = lanes(out);
    for (let r = 0; r < k; r++) {
        for (let s = 0; s < k; s++) {
            for (let i = 0; i < cIn; i++) {
                for (let o = 0; o < cOut; o++) {
                    di[((o * cIn + i) * k + r) * k + s] =
                        si[((r * k + s) * cIn + i) * cOut + o];
                }
            }
        }
    }
    return out;
}

function denseKernelToEngine(src: Float32Array, inF: number, units: number,
                             flat?: { h: number; w: number; c: number },
                             ): Float32Array {
    const out = new Float32Array(src.length);
    const si = lanes(src);
    const di = lanes(out);
    for (let e = 0; e < inF; e++) {
        let t = e;
        if (flat) {
            const hw = flat.h * flat.w;
            const c = Math.floor(e / hw);
            const rem = e % hw;
            const hh = Math.floor(rem / flat.w);
            const ww = rem % flat.w;
            t = (hh * flat.w + ww) * flat.c + c;
        }
        for (let o = 0; o < units; o++) {
            di[o * inF + e] = si[t * units + o];
        }
    }
    return out;
}

function squareOf(v: number | number[], layer: string,
                  what: string): number {
    const pair = Array.isArray(v) ? v : [v, v];
    if (pair[0] !== pair[1]) {
        throw new UnsupportedModuleError([{
            layer, className: '', reason: `non-square ${what} ${pair}`,
        }]);
    }
    return pair[0];
}

function data32(t: tf.Tensor): Float32Array {
    const arr = t.dataSync();
    if (!(arr instanceof Float32Array)) {
        throw new Error('expected float32 weights');
    }
    return arr;
}

function convOut(extent: number, k: number, stride: number,
                 pad: number): number {
    return Math.floor((extent + 2 * pad - k) / stride) + 1;
}

class GraphBuilder {
    nodes: GraphNode[] = [];
    edges: Edge[] = [];
    map: ExportEntry[] = [];
    head = 'input';
    private used = new Set(['input', 'loss', 'output']);

    constructor() {
        this.nodes.push({ id: 'input', kind: 'input', attrs: {}, params: {} });
    }

    freshId(base: string): string {
        let id = base;
        let k = 1;
        while (this.used.has(id)) {
            id = `${base}_${k++}`;
        }
        this.used.add(id);
        return id;
    }

    append(node: GraphNode, source: string,
           params: Record<string, string> = {}): void {
        this.nodes.push(node);
        this.edges.push([this.head, node.id, 0]);
        this.head = node.id;
        this.map.push({ source, kind: node.kind, params });
    }
}

interface LayerState {
    shape: Shape;
    /** image shape at the most recent flatten, consumed by the next dense */
    pendingFlatten?: { h: number; w: number; c: number };
}

function asImage(shape: Shape, layer: string): { h: number; w: number; c: number } {
    if (shape.kind !== 'image') {
        throw new Error(`layer ${layer}: expected 4-D input, got a vector`);
    }
    return shape;
}

function convPadding(padding: string, k: number, stride: number,
                     layer: string, className: string): number {
    if (padding === 'valid') {
        return 0;
    }
    if (padding === 'same' && stride === 1 && k % 2 === 1) {
        return (k - 1) / 2;
    }
    throw new UnsupportedModuleError([{
        layer, className,
        reason: `padding '${padding}' with kernel ${k} stride ${stride} ` +
            'has no symmetric integer equivalent',
    }]);
}

/** Build the engine graph for a loaded model; does not touch the disk. */
export function buildEngineGraph(model: tf.LayersModel,
                                 options: ExportOptions = {}): {
    graph: EngineGraph;
    map: ExportMap;
} {
    const b = new GraphBuilder();
    const skipped: UnsupportedEntry[] = [];
    const state: LayerState = { shape: { kind: 'vector', n: 0 } };
    let sawInput = false;
    let lastDenseUnits = 0;
    let lastKind = '';

    function reject(layer: tf.layers.Layer, reason: string): never {
        throw new UnsupportedModuleError([{
            layer: layer.name,
            className: layer.getClassName(),
            reason,
        }]);
    }

    for (const layer of model.layers) {
        const className = layer.getClassName();
        const cfg = layer.getConfig() as Record<string, unknown>;
        if (Array.isArray(layer.input)) {
            reject(layer, 'multi-input layers are not supported');
        }

        if (className === 'InputLayer') {
            const bis = cfg.batchInputShape as (number | null)[];
            if (!bis || bis.length !== 4) {
                reject(layer, `input must be 4-D [batch,h,w,c], got ${bis}`);
            }
            state.shape = {
                kind: 'image',
                h: bis[1] as number,
                w: bis[2] as number,
                c: bis[3] as number,
            };
            sawInput = true;
            continue;
        }
        if (!sawInput) {
            throw new Error(`layer ${layer.name} precedes the input layer`);
        }

        if (className === 'Conv2D') {
            const img = asImage(state.shape, layer.name);
            if (cfg.dataFormat !== 'channelsLast') {
                reject(layer, `dataFormat ${cfg.dataFormat}`);
            }
            const k = squareOf(cfg.kernelSize as number | number[],
                               layer.name, 'kernel');
            const stride = squareOf(cfg.strides as number | number[],
                                    layer.name, 'stride');
            const dil = squareOf((cfg.dilationRate ?? 1) as number | number[],
                                 layer.name, 'dilation');
            if (dil !== 1) {
                reject(layer, `dilation ${dil}`);
            }
            const pad = convPadding(cfg.padding as string, k, stride,
                                    layer.name, className);
            const filters = cfg.filters as number;
            const weights = layer.getWeights();
            const params: GraphNode['params'] = {
                weight: {
                    shape: [filters, img.c, k, k],
                    data: convKernelToEngine(data32(weights[0]), k,
                                             img.c, filters),
                },
            };
            const names: Record<string, string> = {
                weight: `${layer.name}/kernel`,
            };
            if (cfg.useBias) {
                params.bias = { shape: [filters], data: data32(weights[1]) };
                names.bias = `${layer.name}/bias`;
            }
            b.append({
                id: b.freshId(layer.name),
                kind: 'conv2d',
                attrs: {
                    in_channels: img.c,
                    out_channels: filters,
                    kernel: k,
                    stride,
                    padding: pad,
                },
                params,
            }, layer.name, names);
            state.shape = {
                kind: 'image',
                h: convOut(img.h, k, stride, pad),
                w: convOut(img.w, k, stride, pad),
                c: filters,
            };
            lastKind = 'conv2d';
        } else if (className === 'Dense') {
            if (state.shape.kind !== 'vector') {
                reject(layer, 'dense over spatial input (flatten first)');
            }
            const inF = (state.shape as { n: number }).n;
            const units = cfg.units as number;
            const weights = layer.getWeights();
            const params: GraphNode['params'] = {
                weight: {
                    shape: [units, inF],
                    data: denseKernelToEngine(data32(weights[0]), inF, units,
                                              state.pendingFlatten),
                },
            };
            const names: Record<string, string> = {
                weight: `${layer.name}/kernel`,
            };
            if (cfg.useBias) {
                params.bias = { shape: [units], data: data32(weights[1]) };
                names.bias = `${layer.name}/bias`;
            }
            b.append({
                id: b.freshId(layer.name),
                kind: 'linear',
                attrs: { in_features: inF, out_features: units },
                params,
            }, layer.name, names);
            state.pendingFlatten = undefined;
            state.shape = { kind: 'vector', n: units };
            lastDenseUnits = units;
            lastKind = 'linear';
        } else if (className === 'BatchNormalization') {
            const img = asImage(state.shape, layer.name);
            const axis = cfg.axis as number;
            if (axis !== -1 && axis !== 3) {
                reject(layer, `axis ${axis} (channels-last required)`);
            }
            if (!cfg.center || !cfg.scale) {
                reject(layer, 'batchnorm without center+scale');
            }
            const [gamma, beta, mean, variance] = layer.getWeights();
            b.append({
                id: b.freshId(layer.name),
                kind: 'batchnorm2d',
                attrs: {
                    num_features: img.c,
                    epsilon: cfg.epsilon as number,
                    momentum: Math.round(
                        (1 - (cfg.momentum as number)) * 1e6) / 1e6,
                },
                params: {
                    gamma: { shape: [img.c], data: data32(gamma) },
                    beta: { shape: [img.c], data: data32(beta) },
                    running_mean: { shape: [img.c], data: data32(mean) },
                    running_var: { shape: [img.c], data: data32(variance) },
                },
            }, layer.name, {
                gamma: `${layer.name}/gamma`,
                beta: `${layer.name}/beta`,
                running_mean: `${layer.name}/moving_mean`,
                running_var: `${layer.name}/moving_variance`,
            });
            lastKind = 'batchnorm2d';
        } else if (className === 'MaxPooling2D'
                   || className === 'AveragePooling2D') {
            const img = asImage(state.shape, layer.name);
            const k = squareOf(cfg.poolSize as number | number[],
                               layer.name, 'pool size');
            const stride = squareOf(cfg.strides as number | number[],
                                    layer.name, 'stride');
            if (cfg.padding !== 'valid') {
                reject(layer, `pooling padding '${cfg.padding}'`);
            }
            b.append({
                id: b.freshId(layer.name),
                kind: className === 'MaxPooling2D' ? 'maxpool2d' : 'avgpool2d',
                attrs: { kernel: k, stride },
                params: {},
            }, layer.name);
            state.shape = {
                kind: 'image',
                h: convOut(img.h, k, stride, 0),
                w: convOut(img.w, k, stride, 0),
                c: img.c,
            };
            lastKind = 'pool';
        } else if (className === 'GlobalAveragePooling2D') {
            const img = asImage(state.shape, layer.name);
            b.append({
                id: b.freshId(layer.name),
                kind: 'globalavgpool',
                attrs: {},
                params: {},
            }, layer.name);
            state.shape = { kind: 'vector', n: img.c };
            state.pendingFlatten = undefined;
            lastKind = 'globalavgpool';
        } else if (className === 'Flatten') {
            const img = asImage(state.shape, layer.name);
            b.append({
                id: b.freshId(layer.name),
                kind: 'flatten',
                attrs: {},
                params: {},
            }, layer.name);
            state.shape = { kind: 'vector', n: img.c * img.h * img.w };
            state.pendingFlatten = { h: img.h, w: img.w, c: img.c };
            lastKind = 'flatten';
        } else if (className === 'Activation'
                   && (cfg.activation === 'relu'
                       || (cfg.activation as { className?: string })
                           ?.className === 'relu')) {
            b.append({
                id: b.freshId(layer.name),
                kind: 'relu',
                attrs: {},
                params: {},
            }, layer.name);
            lastKind = 'relu';
        } else {
            const entry: UnsupportedEntry = {
                layer: layer.name,
                className,
                reason: 'no engine equivalent',
            };
            if (!options.skipValidate) {
                throw new UnsupportedModuleError([entry]);
            }
            const inT = layer.input;
            const outT = layer.output;
            if (Array.isArray(inT) || Array.isArray(outT)) {
                reject(layer, 'multi-output layers are not supported');
            }
            const inShape = JSON.stringify(inT.shape);
            const outShape = JSON.stringify(outT.shape);
            if (inShape !== outShape) {
                throw new UnsupportedModuleError([{
                    ...entry,
                    reason: `cannot skip: reshapes ${inShape} -> ${outShape}`,
                }]);
            }
            skipped.push(entry);
            continue;
        }

        // fused relu on conv/dense becomes its own node
        const act = cfg.activation as
            string | { className?: string } | undefined;
        const actName = typeof act === 'string' ? act : act?.className;
        if ((className === 'Conv2D' || className === 'Dense')
            && actName && actName !== 'linear') {
            if (actName !== 'relu') {
                reject(layer, `fused activation '${actName}'`);
            }
            b.append({
                id: b.freshId(`${layer.name}_relu`),
                kind: 'relu',
                attrs: {},
                params: {},
            }, layer.name);
            lastKind = 'relu';
        }
    }

    if (!sawInput) {
        throw new Error('model has no input layer');
    }
    if (lastKind !== 'linear') {
        throw new Error('model must end in a dense logits layer');
    }

    // engine graphs carry an explicit loss head
    b.nodes.push({ id: 'loss', kind: 'softmax_ce_loss', attrs: {}, params: {} });
    b.edges.push([b.head, 'loss', 0]);
    b.nodes.push({ id: 'output', kind: 'output', attrs: {}, params: {} });
    b.edges.push(['loss', 'output', 0]);

    const input = model.layers.find(
        (l) => l.getClassName() === 'InputLayer');
    const bis = (input!.getConfig() as Record<string, unknown>)
        .batchInputShape as number[];
    return {
        graph: {
            name: options.name ?? model.name,
            inputShape: [bis[3], bis[1], bis[2]],
            numClasses: lastDenseUnits,
            nodes: b.nodes,
            edges: b.edges,
        },
        map: { entries: b.map, unsupported: skipped },
    };
}

/** Export a checkpoint on disk into an engine model directory. */
export async function exportModel(modelJsonPath: string, outDir: string,
                                  options: ExportOptions = {}): Promise<ExportMap> {
    const model = await loadSourceModel(modelJsonPath);
    const { graph, map } = buildEngineGraph(model, options);
    writeModelDir(outDir, graph);
    return map;
}
