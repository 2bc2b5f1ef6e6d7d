/**
 * A tiny decoder-only transformer with low-rank adapters.
 *
 * Every linear module keeps a frozen base weight plus a trainable low-rank
 * update (A down-projection, B up-projection scaled by alpha/rank, B
 * initialized to zero so the adapter starts as the identity). Only the
 * adapter matrices, and optionally the output head, receive gradients.
 */

import * as tf from '@tensorflow/tfjs';

export interface ModelConfig {
    vocabSize: number;
    blockSize: number;
    nEmbed: number;
    nHead: number;
    nLayer: number;
    loraRank: number;
    loraAlpha: number;
    unfreezeHead: boolean;
    seed: number;
}

export const TINY_DEFAULTS = {
    blockSize: 1024,
    nEmbed: 64,
    nHead: 4,
    nLayer: 2,
};

class LoraLinear {
    readonly name: string;
    readonly base: tf.Variable;
    readonly loraA: tf.Variable;
    readonly loraB: tf.Variable;
    readonly scale: number;

    constructor(name: string, nIn: number, nOut: number, rank: number, alpha: number, seed: number) {
        // tfjs variable names live in a global registry, so models keep their
        // own logical names and let the engine auto-name the variables.
        this.name = name;
        this.base = tf.variable(
            tf.randomNormal([nIn, nOut], 0, 0.02, 'float32', seed),
            false,
        );
        this.loraA = tf.variable(
            tf.randomNormal([nIn, rank], 0, 0.01, 'float32', seed + 1),
            true,
        );
        this.loraB = tf.variable(tf.zeros([rank, nOut]), true);
        this.scale = alpha / rank;
    }

    /** x: [B, T, nIn] -> [B, T, nOut] */
    apply(x: tf.Tensor3D): tf.Tensor3D {
        const [b, t, nIn] = x.shape;
        const flat = x.reshape([b * t, nIn]) as tf.Tensor2D;
        const main = tf.matMul(flat, this.base as tf.Tensor2D);
        const low = tf.matMul(
            tf.matMul(flat, this.loraA as tf.Tensor2D),
            this.loraB as tf.Tensor2D,
        );
        const out = tf.add(main, tf.mul(low, this.scale));
        return out.reshape([b, t, this.base.shape[1] as number]) as tf.Tensor3D;
    }

    namedTrainables(): Array<[string, tf.Variable]> {
        return [
            [`${this.name}.loraA`, this.loraA],
            [`${this.name}.loraB`, this.loraB],
        ];
    }

    all(): tf.Variable[] {
        return [this.base, this.loraA, this.loraB];
    }
}

class LayerNorm {
    readonly gain: tf.Variable;
    readonly bias: tf.Variable;

    constructor(name: string, dim: number) {
        void name;
        this.gain = tf.variable(tf.ones([dim]), false);
        this.bias = tf.variable(tf.zeros([dim]), false);
    }

    apply(x: tf.Tensor3D): tf.Tensor3D {
        const { mean, variance } = tf.moments(x, -1, true);
        const normed = tf.div(tf.sub(x, mean), tf.sqrt(tf.add(variance, 1e-5)));
        return tf.add(tf.mul(normed, this.gain), this.bias) as tf.Tensor3D;
    }

    all(): tf.Variable[] {
        return [this.gain, this.bias];
    }
}

class Block {
    readonly ln1: LayerNorm;
    readonly ln2: LayerNorm;
    readonly wq: LoraLinear;
    readonly wk: LoraLinear;
    readonly wv: LoraLinear;
    readonly wo: LoraLinear;
    readonly fcIn: LoraLinear;
    readonly fcOut: LoraLinear;
    readonly nHead: number;

    constructor(name: string, config: ModelConfig, seed: number) {
        const e = config.nEmbed;
        const r = config.loraRank;
        const a = config.loraAlpha;
        this.nHead = config.nHead;
        this.ln1 = new LayerNorm(`${name}.ln1`, e);
        this.ln2 = new LayerNorm(`${name}.ln2`, e);
        this.wq = new LoraLinear(`${name}.wq`, e, e, r, a, seed);
        this.wk = new LoraLinear(`${name}.wk`, e, e, r, a, seed + 10);
        this.wv = new LoraLinear(`${name}.wv`, e, e, r, a, seed + 20);
        this.wo = new LoraLinear(`${name}.wo`, e, e, r, a, seed + 30);
        this.fcIn = new LoraLinear(`${name}.fcIn`, e, 4 * e, r, a, seed + 40);
        this.fcOut = new LoraLinear(`${name}.fcOut`, 4 * e, e, r, a, seed + 50);
    }

    private attention(x: tf.Tensor3D): tf.Tensor3D {
        const [b, t, e] = x.shape;
        const h = this.nHead;
        const hs = e / h;
        const split = (y: tf.Tensor3D) =>
            y.reshape([b, t, h, hs]).transpose([0, 2, 1, 3]) as tf.Tensor4D;
        const q = split(this.wq.apply(x));
        const k = split(this.wk.apply(x));
        const v = split(this.wv.apply(x));
        let scores = tf.div(tf.matMul(q, k, false, true), Math.sqrt(hs));
        const causal = tf.linalg.bandPart(tf.ones([t, t]), -1, 0);
        scores = tf.add(scores, tf.mul(tf.sub(causal, 1), 1e9));
        const att = tf.softmax(scores);
        const gathered = tf.matMul(att, v) as tf.Tensor4D;
        const merged = gathered.transpose([0, 2, 1, 3]).reshape([b, t, e]) as tf.Tensor3D;
        return this.wo.apply(merged);
    }

    apply(x: tf.Tensor3D): tf.Tensor3D {
        const attended = tf.add(x, this.attention(this.ln1.apply(x))) as tf.Tensor3D;
        const hidden = tf.relu(this.fcIn.apply(this.ln2.apply(attended))) as tf.Tensor3D;
        return tf.add(attended, this.fcOut.apply(hidden)) as tf.Tensor3D;
    }

    namedTrainables(): Array<[string, tf.Variable]> {
        return [this.wq, this.wk, this.wv, this.wo, this.fcIn, this.fcOut].flatMap((m) =>
            m.namedTrainables(),
        );
    }

    all(): tf.Variable[] {
        return [
            ...this.ln1.all(),
            ...this.ln2.all(),
            ...[this.wq, this.wk, this.wv, this.wo, this.fcIn, this.fcOut].flatMap((m) => m.all()),
        ];
    }
}

export class TinyDecoder {
    readonly config: ModelConfig;
    readonly tokenEmbedding: tf.Variable;
    readonly positionEmbedding: tf.Variable;
    readonly blocks: Block[];
    readonly lnFinal: LayerNorm;
    readonly head: tf.Variable;

    constructor(config: ModelConfig) {
        this.config = config;
        if (config.nEmbed % config.nHead !== 0) {
            throw new Error('nEmbed must be divisible by nHead');
        }
        const seed = config.seed;
        this.tokenEmbedding = tf.variable(
            tf.randomNormal([config.vocabSize, config.nEmbed], 0, 0.02, 'float32', seed + 1000),
            false,
        );
        this.positionEmbedding = tf.variable(
            tf.randomNormal([config.blockSize, config.nEmbed], 0, 0.02, 'float32', seed + 2000),
            false,
        );
        this.blocks = [];
        for (let i = 0; i < config.nLayer; i++) {
            this.blocks.push(new Block(`block${i}`, config, seed + i * 100));
        }
        this.lnFinal = new LayerNorm('lnFinal', config.nEmbed);
        this.head = tf.variable(
            tf.randomNormal([config.nEmbed, config.vocabSize], 0, 0.02, 'float32', seed + 3000),
            config.unfreezeHead,
        );
    }

    /** tokens: [B, T] int32 -> logits [B, T, V] */
    forward(tokens: tf.Tensor2D): tf.Tensor3D {
        const [, t] = tokens.shape;
        if (t > this.config.blockSize) {
            throw new Error(`sequence length ${t} exceeds block size ${this.config.blockSize}`);
        }
        const tok = tf.gather(this.tokenEmbedding, tokens) as tf.Tensor3D;
        const pos = tf.slice(this.positionEmbedding, [0, 0], [t, this.config.nEmbed]);
        let x = tf.add(tok, pos) as tf.Tensor3D;
        for (const block of this.blocks) {
            x = block.apply(x);
        }
        x = this.lnFinal.apply(x);
        const [b] = tokens.shape;
        const flat = x.reshape([b * t, this.config.nEmbed]) as tf.Tensor2D;
        const logits = tf.matMul(flat, this.head as tf.Tensor2D);
        return logits.reshape([b, t, this.config.vocabSize]) as tf.Tensor3D;
    }

    /**
     * Next-token cross entropy averaged over positions whose *predicted*
     * token is mask=1; everything else (prompt, padding) contributes nothing.
     */
    maskedLoss(tokens: tf.Tensor2D, lossMask: tf.Tensor2D): tf.Scalar {
        return tf.tidy(() => {
            const [b, t] = tokens.shape;
            const logits = this.forward(tokens);
            const inputLogits = tf.slice(logits, [0, 0, 0], [b, t - 1, this.config.vocabSize]);
            const labels = tf.slice(tokens, [0, 1], [b, t - 1]);
            const mask = tf.cast(tf.slice(lossMask, [0, 1], [b, t - 1]), 'float32');
            const oneHot = tf.oneHot(tf.cast(labels, 'int32'), this.config.vocabSize);
            const logProbs = tf.logSoftmax(inputLogits);
            const nll = tf.neg(tf.sum(tf.mul(oneHot, logProbs), -1));
            const total = tf.sum(tf.mul(nll, mask));
            const count = tf.maximum(tf.sum(mask), 1);
            return tf.div(total, count) as tf.Scalar;
        });
    }

    namedTrainables(): Array<[string, tf.Variable]> {
        const entries = this.blocks.flatMap((blockModule) => blockModule.namedTrainables());
        if (this.config.unfreezeHead) {
            entries.push(['head', this.head]);
        }
        return entries;
    }

    trainables(): tf.Variable[] {
        return this.namedTrainables().map(([, variable]) => variable);
    }

    allVariables(): tf.Variable[] {
        return [
            this.tokenEmbedding,
            this.positionEmbedding,
            ...this.blocks.flatMap((blockModule) => blockModule.all()),
            ...this.lnFinal.all(),
            this.head,
        ];
    }

    paramCount(): number {
        return this.allVariables().reduce((sum, v) => sum + v.size, 0);
    }

    /** Adapter payload: the trainable variables only (LoRA A/B plus head). */
    adapterState(): Record<string, { shape: number[]; values: number[] }> {
        const state: Record<string, { shape: number[]; values: number[] }> = {};
        for (const [name, variable] of this.namedTrainables()) {
            state[name] = {
                shape: variable.shape.slice(),
                values: Array.from(variable.dataSync()),
            };
        }
        return state;
    }

    loadAdapterState(state: Record<string, { shape: number[]; values: number[] }>): void {
        for (const [name, variable] of this.namedTrainables()) {
            const entry = state[name];
            if (!entry) {
                throw new Error(`adapter state is missing ${name}`);
            }
            variable.assign(tf.tensor(entry.values, entry.shape as number[], 'float32'));
        }
    }
}
