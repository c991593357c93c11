/**
 * Command line entry points: export-model, export-calib, verify.
 *
 * Each subcommand prints a single JSON result line on success. Exit codes:
 * 0 success, 1 parity failure, 2 bad input or unsupported architecture.
 */

import { parseArgs } from 'node:util';

import { exportCalibration } from './exportCalib';
import { exportModel, UnsupportedModuleError } from './exportModel';
import { EngineError, verifyParity } from './verify';

function usage(): string {
    return [
        'usage: prunekit-export <command> ...',
        '',
        '  export-model <model.json> <out_dir> [--name NAME] [--skip-validate]',
        '  export-calib <batch_dir> <out_dir> --n N [--seed SEED]',
        '  verify <model.json> <exported_dir> <calib_dir>',
        '         [--engine BIN] [--threshold T]',
    ].join('\n');
}

async function cmdExportModel(argv: string[]): Promise<number> {
    const { values, positionals } = parseArgs({
        args: argv,
        allowPositionals: true,
        options: {
            name: { type: 'string' },
            'skip-validate': { type: 'boolean', default: false },
        },
    });
    if (positionals.length !== 2) {
        throw new Error('export-model needs <model.json> <out_dir>');
    }
    const map = await exportModel(positionals[0], positionals[1], {
        name: values.name,
        skipValidate: values['skip-validate'],
    });
    console.log(JSON.stringify({
        nodes: map.entries.length,
        skipped: map.unsupported.map((u) => u.layer),
        out: positionals[1],
    }));
    return 0;
}

function cmdExportCalib(argv: string[]): number {
    const { values, positionals } = parseArgs({
        args: argv,
        allowPositionals: true,
        options: {
            n: { type: 'string' },
            seed: { type: 'string', default: '0' },
        },
    });
    if (positionals.length !== 2 || values.n === undefined) {
        throw new Error('export-calib needs <batch_dir> <out_dir> --n N');
    }
    const result = exportCalibration(positionals[0], positionals[1],
                                     Number(values.n), Number(values.seed));
    console.log(JSON.stringify({
        count: result.count,
        seed: Number(values.seed),
        out: positionals[1],
    }));
    return 0;
}

async function cmdVerify(argv: string[]): Promise<number> {
    const { values, positionals } = parseArgs({
        args: argv,
        allowPositionals: true,
        options: {
            engine: { type: 'string' },
            threshold: { type: 'string' },
        },
    });
    if (positionals.length !== 3) {
        throw new Error('verify needs <model.json> <exported_dir> <calib_dir>');
    }
    const report = await verifyParity(positionals[0], positionals[1],
                                      positionals[2], {
        engineBin: values.engine,
        threshold: values.threshold === undefined
            ? undefined : Number(values.threshold),
    });
    console.log(JSON.stringify({
        max_abs_deviation: report.maxAbsDeviation,
        threshold: report.threshold,
        count: report.count,
        pass: report.pass,
    }));
    return report.pass ? 0 : 1;
}

export async function main(argv: string[]): Promise<number> {
    const [command, ...rest] = argv;
    try {
        switch (command) {
            case 'export-model':
                return await cmdExportModel(rest);
            case 'export-calib':
                return cmdExportCalib(rest);
            case 'verify':
                return await cmdVerify(rest);
            default:
                console.error(usage());
                return 2;
        }
    } catch (err) {
        if (err instanceof UnsupportedModuleError
            || err instanceof EngineError
            || err instanceof Error) {
            console.error(`error: ${(err as Error).message}`);
            return 2;
        }
        throw err;
    }
}
