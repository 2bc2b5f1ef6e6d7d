import yargs from 'yargs';
import { hideBin } from 'yargs/helpers';

import { DEFAULT_SPEC, makeSpec, train } from './train.js';

async function main(): Promise<void> {
    const argv = await yargs(hideBin(process.argv))
        .command('train', 'fine-tune the tiny decoder on a mixture JSONL')
        .demandCommand(1)
        .option('mixture', { type: 'string', demandOption: true, describe: 'mixture JSONL path' })
        .option('out', { type: 'string', demandOption: true, describe: 'output directory' })
        .option('epochs', { type: 'number', default: DEFAULT_SPEC.epochs })
        .option('batch-size', { type: 'number', default: DEFAULT_SPEC.batchSize })
        .option('learning-rate', { type: 'number', default: DEFAULT_SPEC.learningRate })
        .option('lora-rank', { type: 'number', default: DEFAULT_SPEC.loraRank })
        .option('lora-alpha', { type: 'number', default: DEFAULT_SPEC.loraAlpha })
        .option('freeze-head', { type: 'boolean', default: false })
        .option('seed', { type: 'number', default: DEFAULT_SPEC.seed })
        .option('block-size', { type: 'number', default: DEFAULT_SPEC.blockSize })
        .option('max-steps', { type: 'number' })
        .strict()
        .parse();

    const result = await train(
        makeSpec({
            mixturePath: argv.mixture,
            outDir: argv.out,
            epochs: argv.epochs,
            batchSize: argv['batch-size'],
            learningRate: argv['learning-rate'],
            loraRank: argv['lora-rank'],
            loraAlpha: argv['lora-alpha'],
            unfreezeHead: !argv['freeze-head'],
            seed: argv.seed,
            blockSize: argv['block-size'],
            maxSteps: argv['max-steps'],
        }),
    );
    const first = result.lossLog[0]?.loss;
    const last = result.lossLog[result.lossLog.length - 1]?.loss;
    console.log(
        `trained ${result.lossLog.length} steps ` +
            `(params ${result.paramCount}, trainable ${result.trainableCount}); ` +
            `loss ${first?.toFixed(4)} -> ${last?.toFixed(4)}; ` +
            `rendered ${result.renderStats.rendered}, skipped ${result.renderStats.skipped}`,
    );
}

main().catch((err) => {
    console.error(err);
    process.exit(1);
});
