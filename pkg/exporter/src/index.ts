export {
    DATA_NAME, FORMAT_TAG, LABELS_NAME, MANIFEST_NAME, META_NAME,
    WEIGHTS_NAME, float32Bytes, readModelManifest, readWeightsBlob,
    uint32Bytes, writeDatasetDir, writeModelDir,
} from './format';
export type {
    DatasetDir, Edge, EngineGraph, GraphNode, ModelManifest, NodeJson,
    ParamEntry,
} from './format';
export {
    fileLoadHandler, fileSaveHandler, loadSourceModel, saveSourceModel,
} from './io';
export {
    UnsupportedModuleError, buildEngineGraph, exportModel,
} from './exportModel';
export type {
    ExportEntry, ExportMap, ExportOptions, UnsupportedEntry,
} from './exportModel';
export {
    BATCH_INPUTS_NAME, BATCH_LABELS_NAME, BATCH_META_NAME, exportCalibration,
    readSourceBatch, selectIndices,
} from './exportCalib';
export type { CalibResult, SourceBatch } from './exportCalib';
export { EngineError, PARITY_THRESHOLD, verifyParity } from './verify';
export type { ParityReport, VerifyOptions } from './verify';
