/**
 * Training loop: masked language-model loss over the rendered chats, Adam
 * on the adapter parameters, one checkpoint per epoch plus a per-step loss
 * log. Defaults follow the reference recipe (rank and alpha 32, learning
 * rate 5e-5, batch 64, 10 epochs, output head unfrozen); everything is
 * overridable for desk-scale smoke runs.
 */

import * as fs from 'fs';
import * as path from 'path';
import * as tf from '@tensorflow/tfjs';

import { initBackend } from './backend.js';
import { renderAll, RenderedChat, RenderStats } from './chat.js';
import { readMixture, taskCounts } from './mixture.js';
import { CharTokenizer } from './tokenizer.js';
import { ModelConfig, TinyDecoder, TINY_DEFAULTS } from './model.js';

export interface TrainSpec {
    mixturePath: string;
    outDir: string;
    baseModelId: string;
    loraRank: number;
    loraAlpha: number;
    learningRate: number;
    batchSize: number;
    epochs: number;
    unfreezeHead: boolean;
    seed: number;
    blockSize: number;
    nEmbed: number;
    nHead: number;
    nLayer: number;
    maxSteps?: number;
}

export const DEFAULT_SPEC: Omit<TrainSpec, 'mixturePath' | 'outDir'> = {
    baseModelId: 'tiny-decoder',
    loraRank: 32,
    loraAlpha: 32,
    learningRate: 5e-5,
    batchSize: 64,
    epochs: 10,
    unfreezeHead: true,
    seed: 0,
    ...TINY_DEFAULTS,
};

export interface LossPoint {
    epoch: number;
    step: number;
    loss: number;
}

export interface TrainResult {
    lossLog: LossPoint[];
    renderStats: RenderStats;
    paramCount: number;
    trainableCount: number;
    vocabSize: number;
    adapterDirs: string[];
}

export function makeSpec(overrides: Partial<TrainSpec> & Pick<TrainSpec, 'mixturePath' | 'outDir'>): TrainSpec {
    return { ...DEFAULT_SPEC, ...overrides };
}

/** Deterministic PRNG for shuffling (mulberry32). */
export function seededRandom(seed: number): () => number {
    let state = seed >>> 0;
    return () => {
        state = (state + 0x6d2b79f5) >>> 0;
        let z = state;
        z = Math.imul(z ^ (z >>> 15), z | 1);
        z ^= z + Math.imul(z ^ (z >>> 7), z | 61);
        return ((z ^ (z >>> 14)) >>> 0) / 4294967296;
    };
}

function shuffled<T>(items: T[], random: () => number): T[] {
    const out = items.slice();
    for (let i = out.length - 1; i > 0; i--) {
        const j = Math.floor(random() * (i + 1));
        [out[i], out[j]] = [out[j], out[i]];
    }
    return out;
}

export function padBatch(
    chats: RenderedChat[],
    padId: number,
): { tokens: tf.Tensor2D; mask: tf.Tensor2D } {
    const maxLength = Math.max(...chats.map((c) => c.tokens.length));
    const tokens = chats.map((c) => [
        ...c.tokens,
        ...new Array(maxLength - c.tokens.length).fill(padId),
    ]);
    const mask = chats.map((c) => [
        ...c.lossMask,
        ...new Array(maxLength - c.lossMask.length).fill(0),
    ]);
    return {
        tokens: tf.tensor2d(tokens, [chats.length, maxLength], 'int32'),
        mask: tf.tensor2d(mask, [chats.length, maxLength], 'int32'),
    };
}

function writeAdapter(
    dir: string,
    model: TinyDecoder,
    tokenizer: CharTokenizer,
    spec: TrainSpec,
): void {
    fs.mkdirSync(dir, { recursive: true });
    fs.writeFileSync(
        path.join(dir, 'adapter.json'),
        JSON.stringify({ baseModelId: spec.baseModelId, state: model.adapterState() }),
    );
    fs.writeFileSync(path.join(dir, 'vocab.json'), JSON.stringify(tokenizer.toJSON()));
    fs.writeFileSync(
        path.join(dir, 'config.json'),
        JSON.stringify({ ...model.config }, null, 2),
    );
}

export function buildModel(spec: TrainSpec, vocabSize: number): TinyDecoder {
    const config: ModelConfig = {
        vocabSize,
        blockSize: spec.blockSize,
        nEmbed: spec.nEmbed,
        nHead: spec.nHead,
        nLayer: spec.nLayer,
        loraRank: spec.loraRank,
        loraAlpha: spec.loraAlpha,
        unfreezeHead: spec.unfreezeHead,
        seed: spec.seed,
    };
    return new TinyDecoder(config);
}

export async function train(spec: TrainSpec): Promise<TrainResult> {
    await initBackend();
    const samples = readMixture(spec.mixturePath);
    if (samples.length === 0) {
        throw new Error(`mixture ${spec.mixturePath} holds no samples`);
    }
    const tokenizer = CharTokenizer.build(
        (function* () {
            for (const s of samples) {
                yield s.instruction;
                yield s.target;
            }
            yield 'user:\nassistant:\n';
        })(),
    );
    const { rendered, stats } = renderAll(samples, tokenizer, spec.blockSize);
    if (rendered.length === 0) {
        throw new Error('no sample fits the block size; nothing to train on');
    }
    const model = buildModel(spec, tokenizer.vocabSize);
    const optimizer = tf.train.adam(spec.learningRate);
    const random = seededRandom(spec.seed + 1);
    const lossLog: LossPoint[] = [];
    const adapterDirs: string[] = [];

    fs.mkdirSync(spec.outDir, { recursive: true });
    writeAdapter(path.join(spec.outDir, 'epoch_0'), model, tokenizer, spec);
    adapterDirs.push(path.join(spec.outDir, 'epoch_0'));

    let step = 0;
    let stop = false;
    for (let epoch = 1; epoch <= spec.epochs && !stop; epoch++) {
        const order = shuffled(rendered, random);
        for (let start = 0; start < order.length && !stop; start += spec.batchSize) {
            const batch = order.slice(start, start + spec.batchSize);
            const { tokens, mask } = padBatch(batch, tokenizer.padId);
            const cost = optimizer.minimize(
                () => model.maskedLoss(tokens, mask),
                true,
                model.trainables(),
            ) as tf.Scalar;
            const loss = cost.dataSync()[0];
            cost.dispose();
            tokens.dispose();
            mask.dispose();
            step += 1;
            if (!Number.isFinite(loss)) {
                throw new Error(
                    `non-finite loss ${loss} at epoch ${epoch} step ${step}; ` +
                        'lower the learning rate or inspect the batch',
                );
            }
            lossLog.push({ epoch, step, loss });
            if (spec.maxSteps !== undefined && step >= spec.maxSteps) {
                stop = true;
            }
        }
        const dir = path.join(spec.outDir, `epoch_${epoch}`);
        writeAdapter(dir, model, tokenizer, spec);
        adapterDirs.push(dir);
    }

    const csv = ['epoch,step,loss', ...lossLog.map((p) => `${p.epoch},${p.step},${p.loss}`)];
    fs.writeFileSync(path.join(spec.outDir, 'loss.csv'), csv.join('\n') + '\n');
    fs.writeFileSync(
        path.join(spec.outDir, 'train_manifest.json'),
        JSON.stringify(
            {
                spec: { ...spec },
                taskCounts: taskCounts(samples),
                renderStats: stats,
                paramCount: model.paramCount(),
                trainableCount: model.trainables().reduce((sum, v) => sum + v.size, 0),
                steps: lossLog.length,
            },
            null,
            2,
        ),
    );
    return {
        lossLog,
        renderStats: stats,
        paramCount: model.paramCount(),
        trainableCount: model.trainables().reduce((sum, v) => sum + v.size, 0),
        vocabSize: tokenizer.vocabSize,
        adapterDirs,
    };
}
