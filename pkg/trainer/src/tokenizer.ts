/** Character-level tokenizer built from the mixture's text. */

export const PAD = '<pad>';
export const BOS = '<bos>';
export const EOS = '<eos>';
export const UNK = '<unk>';

export class CharTokenizer {
    readonly chars: string[];
    private readonly index: Map<string, number>;

    constructor(chars: string[]) {
        this.chars = chars;
        this.index = new Map(chars.map((c, i) => [c, i]));
        for (const special of [PAD, BOS, EOS, UNK]) {
            if (!this.index.has(special)) {
                throw new Error(`tokenizer vocabulary is missing ${special}`);
            }
        }
    }

    static build(texts: Iterable<string>): CharTokenizer {
        const seen = new Set<string>();
        for (const text of texts) {
            for (const ch of text) seen.add(ch);
        }
        const chars = [PAD, BOS, EOS, UNK, ...Array.from(seen).sort()];
        return new CharTokenizer(chars);
    }

    get vocabSize(): number {
        return this.chars.length;
    }

    get padId(): number {
        return this.index.get(PAD)!;
    }

    get bosId(): number {
        return this.index.get(BOS)!;
    }

    get eosId(): number {
        return this.index.get(EOS)!;
    }

    encode(text: string): number[] {
        const unk = this.index.get(UNK)!;
        return Array.from(text, (ch) => this.index.get(ch) ?? unk);
    }

    decode(ids: number[]): string {
        return ids
            .filter((id) => id >= 4) // drop specials
            .map((id) => this.chars[id] ?? '')
            .join('');
    }

    toJSON(): { chars: string[] } {
        return { chars: this.chars };
    }

    static fromJSON(obj: { chars: string[] }): CharTokenizer {
        return new CharTokenizer(obj.chars);
    }
}
