import { describe, expect, it } from 'vitest';

import { ASSISTANT_MARKER, renderAll, renderChat, USER_MARKER } from '../src/chat.js';
import { TrajectorySample } from '../src/mixture.js';
import { CharTokenizer } from '../src/tokenizer.js';

function sample(instruction: string, target: string): TrajectorySample {
    return {
        task: 'ask',
        case_id: 'c',
        defendant: 'd',
        instruction,
        target,
        provenance: {},
    };
}

function tokenizerFor(...texts: string[]): CharTokenizer {
    return CharTokenizer.build([...texts, USER_MARKER, ASSISTANT_MARKER]);
}

describe('renderChat', () => {
    it('renders one user turn and one assistant turn', () => {
        const s = sample('summarize the case', 'Subject: someone');
        const tok = tokenizerFor(s.instruction, s.target);
        const chat = renderChat(s, tok, 256)!;
        expect(chat.tokens[0]).toBe(tok.bosId);
        expect(chat.tokens[chat.tokens.length - 1]).toBe(tok.eosId);
        const text = tok.decode(chat.tokens);
        expect(text).toBe(USER_MARKER + s.instruction + ASSISTANT_MARKER + s.target);
        expect(text.indexOf('assistant:')).toBe(text.lastIndexOf('assistant:'));
    });

    it('masks exactly the target tokens plus the closing eos', () => {
        const s = sample('what happened?', 'a crime');
        const tok = tokenizerFor(s.instruction, s.target);
        const chat = renderChat(s, tok, 128)!;
        const maskedCount = chat.lossMask.reduce((a, b) => a + b, 0);
        expect(maskedCount).toBe(s.target.length + 1); // chars + eos
        const maskedIds = chat.tokens.filter((_, i) => chat.lossMask[i] === 1);
        expect(tok.decode(maskedIds)).toBe(s.target); // eos dropped by decode
        const firstMasked = chat.lossMask.indexOf(1);
        expect(chat.lossMask.slice(0, firstMasked).every((m) => m === 0)).toBe(true);
        expect(chat.lossMask.slice(firstMasked).every((m) => m === 1)).toBe(true);
    });

    it('truncates from the instruction head, never the target', () => {
        const s = sample('I'.repeat(50) + 'KEEPTAIL', 'the verdict text');
        const tok = tokenizerFor(s.instruction, s.target);
        const scaffold = 1 + USER_MARKER.length + ASSISTANT_MARKER.length + s.target.length + 1;
        const block = scaffold + 10;
        const chat = renderChat(s, tok, block)!;
        expect(chat.tokens.length).toBe(block);
        expect(chat.truncatedTokens).toBe(s.instruction.length - 10);
        const text = tok.decode(chat.tokens);
        expect(text.endsWith(ASSISTANT_MARKER + s.target)).toBe(true);
        expect(text).toContain('KEEPTAIL'); // the instruction tail survives
        const maskedIds = chat.tokens.filter((_, i) => chat.lossMask[i] === 1);
        expect(tok.decode(maskedIds)).toBe(s.target);
    });

    it('skips a sample whose target alone cannot fit', () => {
        const s = sample('short', 'T'.repeat(500));
        const tok = tokenizerFor(s.instruction, s.target);
        expect(renderChat(s, tok, 64)).toBeNull();
    });

    it('renderAll counts skips and truncations', () => {
        const samples = [
            sample('fits fine', 'ok'),
            sample('L'.repeat(400), 'ok'),
            sample('x', 'T'.repeat(400)),
        ];
        const tok = CharTokenizer.build(
            samples.flatMap((s) => [s.instruction, s.target]).concat([USER_MARKER, ASSISTANT_MARKER]),
        );
        const { rendered, stats } = renderAll(samples, tok, 128);
        expect(rendered).toHaveLength(2);
        expect(stats).toMatchObject({ rendered: 2, skipped: 1, truncated: 1 });
        expect(stats.truncatedTokens).toBeGreaterThan(0);
    });

    it('round-trips unicode text', () => {
        const s = sample('被告人张某', '判决：有期徒刑');
        const tok = tokenizerFor(s.instruction, s.target);
        const chat = renderChat(s, tok, 64)!;
        const maskedIds = chat.tokens.filter((_, i) => chat.lossMask[i] === 1);
        expect(tok.decode(maskedIds)).toBe(s.target);
    });
});
