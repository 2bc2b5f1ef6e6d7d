/**
 * Chat rendering: one sample becomes a single user/assistant exchange whose
 * loss mask covers only the assistant (target) tokens. Over-length samples
 * lose tokens from the instruction head, never from the target; a sample
 * whose target cannot fit at all is skipped and counted.
 */

import { CharTokenizer } from './tokenizer.js';
import { TrajectorySample } from './mixture.js';

export const USER_MARKER = 'user:\n';
export const ASSISTANT_MARKER = '\nassistant:\n';

export interface RenderedChat {
    tokens: number[];
    lossMask: number[]; // 1 exactly on target tokens (and the closing EOS)
    truncatedTokens: number;
}

export interface RenderStats {
    rendered: number;
    skipped: number;
    truncated: number; // samples that lost instruction tokens
    truncatedTokens: number;
}

export function renderChat(
    sample: TrajectorySample,
    tokenizer: CharTokenizer,
    blockSize: number,
): RenderedChat | null {
    const prefix = [tokenizer.bosId, ...tokenizer.encode(USER_MARKER)];
    const middle = tokenizer.encode(ASSISTANT_MARKER);
    const target = [...tokenizer.encode(sample.target), tokenizer.eosId];
    const fixedLength = prefix.length + middle.length + target.length;
    if (fixedLength > blockSize) {
        return null; // the target itself cannot fit; never truncate it
    }
    let instruction = tokenizer.encode(sample.instruction);
    const budget = blockSize - fixedLength;
    let truncatedTokens = 0;
    if (instruction.length > budget) {
        truncatedTokens = instruction.length - budget;
        instruction = instruction.slice(truncatedTokens); // drop the head
    }
    const tokens = [...prefix, ...instruction, ...middle, ...target];
    const lossMask = new Array(tokens.length).fill(0);
    for (let i = tokens.length - target.length; i < tokens.length; i++) {
        lossMask[i] = 1;
    }
    return { tokens, lossMask, truncatedTokens };
}

export function renderAll(
    samples: TrajectorySample[],
    tokenizer: CharTokenizer,
    blockSize: number,
): { rendered: RenderedChat[]; stats: RenderStats } {
    const rendered: RenderedChat[] = [];
    const stats: RenderStats = { rendered: 0, skipped: 0, truncated: 0, truncatedTokens: 0 };
    for (const sample of samples) {
        const chat = renderChat(sample, tokenizer, blockSize);
        if (chat === null) {
            stats.skipped += 1;
            continue;
        }
        rendered.push(chat);
        stats.rendered += 1;
        if (chat.truncatedTokens > 0) {
            stats.truncated += 1;
            stats.truncatedTokens += chat.truncatedTokens;
        }
    }
    return { rendered, stats };
}
