/**
 * Raw input parsing. All sources are plain comma-separated text with a header
 * line; fields must not contain commas. Malformed records are skipped and
 * counted rather than aborting the run.
 */
import * as fs from "node:fs";

export interface ParseResult<T> {
  records: T[];
  skipped: number;
}

function readRows(path: string, expectedHeader: string[], minFields: number): ParseResult<string[]> {
  const text = fs.readFileSync(path, "utf-8");
  const lines = text.split(/\r?\n/).filter((l) => l.trim().length > 0);
  if (lines.length === 0) {
    throw new Error(`${path}: empty input`);
  }
  const header = lines[0].split(",").map((h) => h.trim());
  for (let i = 0; i < expectedHeader.length; i++) {
    if (header[i] !== expectedHeader[i]) {
      throw new Error(
        `${path}: expected header starting with '${expectedHeader.join(",")}', got '${lines[0]}'`);
    }
  }
  const records: string[][] = [];
  let skipped = 0;
  for (const line of lines.slice(1)) {
    const fields = line.split(",").map((f) => f.trim());
    if (fields.length < minFields || fields.slice(0, minFields).some((f) => f.length === 0)) {
      skipped += 1;
      continue;
    }
    records.push(fields);
  }
  return { records, skipped };
}

/** (entity, group) membership rows, e.g. author,paper. */
export function readEntityGroupRecords(path: string): ParseResult<[string, string]> {
  const { records, skipped } = readRows(path, ["author", "paper"], 2);
  return { records: records.map((r) => [r[0], r[1]] as [string, string]), skipped };
}

export interface TaggedItem {
  id: string;
  tokens: string[];
}

/** id,tags rows where tags are whitespace-separated tokens. */
export function readTaggedItems(path: string): ParseResult<TaggedItem> {
  const { records, skipped } = readRows(path, ["id", "tags"], 2);
  const items: TaggedItem[] = [];
  let extraSkipped = 0;
  const seen = new Set<string>();
  for (const r of records) {
    if (seen.has(r[0])) {
      extraSkipped += 1;
      continue;
    }
    seen.add(r[0]);
    items.push({ id: r[0], tokens: r.slice(1).join(" ").toLowerCase().split(/\s+/).filter(Boolean) });
  }
  return { records: items, skipped: skipped + extraSkipped };
}

export interface RawEdge {
  view: string;
  u: string;
  v: string;
  w: number;
}

/** view,u,v[,w] rows describing one or more edge-list views. */
export function readEdgeDump(path: string): ParseResult<RawEdge> {
  const { records, skipped } = readRows(path, ["view", "u", "v"], 3);
  const edges: RawEdge[] = [];
  let extraSkipped = 0;
  for (const r of records) {
    const w = r.length > 3 && r[3].length ? Number(r[3]) : 1;
    if (!Number.isFinite(w) || w <= 0 || r[1] === r[2]) {
      extraSkipped += 1;
      continue;
    }
    edges.push({ view: r[0], u: r[1], v: r[2], w });
  }
  return { records: edges, skipped: skipped + extraSkipped };
}

/** id,label rows. */
export function readLabels(path: string): ParseResult<[string, string]> {
  const { records, skipped } = readRows(path, ["id", "label"], 2);
  return { records: records.map((r) => [r[0], r[1]] as [string, string]), skipped };
}
