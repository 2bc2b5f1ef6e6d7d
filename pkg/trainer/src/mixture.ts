/**
 * Reader for the training-mixture JSONL emitted by the pipeline:
 * one sample per line with task, case_id, defendant, instruction, target,
 * and provenance. This file format is the contract between the Python
 * pipeline and this trainer.
 */

import * as fs from 'fs';

export const TASK_KINDS = [
    'ask',
    'discriminate',
    'sentencing',
    'article',
    'predict_all',
] as const;

export type TaskKind = (typeof TASK_KINDS)[number];

export interface TrajectorySample {
    task: TaskKind;
    case_id: string;
    defendant: string;
    instruction: string;
    target: string;
    provenance: Record<string, unknown>;
}

export function parseSample(obj: unknown, lineNumber: number): TrajectorySample {
    if (typeof obj !== 'object' || obj === null) {
        throw new Error(`line ${lineNumber}: sample must be an object`);
    }
    const record = obj as Record<string, unknown>;
    const task = record.task;
    if (typeof task !== 'string' || !(TASK_KINDS as readonly string[]).includes(task)) {
        throw new Error(`line ${lineNumber}: unknown task ${JSON.stringify(task)}`);
    }
    for (const field of ['case_id', 'defendant', 'instruction', 'target']) {
        if (typeof record[field] !== 'string' || (record[field] as string).length === 0) {
            throw new Error(`line ${lineNumber}: missing or empty field ${field}`);
        }
    }
    return {
        task: task as TaskKind,
        case_id: record.case_id as string,
        defendant: record.defendant as string,
        instruction: record.instruction as string,
        target: record.target as string,
        provenance: (record.provenance as Record<string, unknown>) ?? {},
    };
}

export function readMixture(path: string): TrajectorySample[] {
    const samples: TrajectorySample[] = [];
    const lines = fs.readFileSync(path, 'utf-8').split('\n');
    lines.forEach((line, index) => {
        if (line.trim().length === 0) return;
        let obj: unknown;
        try {
            obj = JSON.parse(line);
        } catch (err) {
            throw new Error(`line ${index + 1}: invalid JSON (${(err as Error).message})`);
        }
        samples.push(parseSample(obj, index + 1));
    });
    return samples;
}

export function taskCounts(samples: TrajectorySample[]): Record<TaskKind, number> {
    const counts = Object.fromEntries(TASK_KINDS.map((t) => [t, 0])) as Record<
        TaskKind,
        number
    >;
    for (const sample of samples) counts[sample.task] += 1;
    return counts;
}
