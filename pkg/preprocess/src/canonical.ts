/**
 * Canonical dataset directory emission.
 *
 * Output layout (consumed by the primary engine's loader):
 *   meta            JSON {classes, nodes, view_names, views}
 *   view_<i>.edges  sorted "u v w" lines, u < v, dense ids
 *   labels          optional sorted "u c" lines
 *   id_map.tsv      raw id -> dense id (one mapping per line)
 *   label_map.tsv   raw label -> class id, when labels are present
 */
import * as fs from "node:fs";
import * as path from "node:path";

import { WeightedEdge } from "./cooccurrence.js";

export interface NamedView {
  name: string;
  edges: WeightedEdge[];
}

/** Dense ids assigned in sorted raw-id order; deterministic for fixed input. */
export function buildIdMap(rawIds: Iterable<string>): Map<string, number> {
  const sorted = [...new Set(rawIds)].sort();
  return new Map(sorted.map((id, i) => [id, i]));
}

/** Integral weights print without a decimal point; others use the shortest
 * round-trippable decimal (JavaScript's default number formatting). */
export function formatWeight(w: number): string {
  return Number.isInteger(w) ? String(w) : String(w);
}

export function emitCanonical(
  views: NamedView[],
  labels: Map<string, string> | null,
  outDir: string,
  idMap?: Map<string, number>,
): void {
  const ids = new Set<string>();
  for (const view of views) {
    for (const e of view.edges) {
      ids.add(e.u);
      ids.add(e.v);
    }
  }
  if (labels) {
    for (const id of labels.keys()) {
      ids.add(id);
    }
  }
  const map = idMap ?? buildIdMap(ids);
  for (const id of ids) {
    if (!map.has(id)) {
      throw new Error(`id-space mismatch: '${id}' missing from the id map`);
    }
  }

  let classNames: string[] = [];
  if (labels && labels.size > 0) {
    classNames = [...new Set(labels.values())].sort();
  }

  fs.mkdirSync(outDir, { recursive: true });
  const meta = {
    classes: classNames.length > 0 ? classNames.length : null,
    nodes: map.size,
    view_names: views.map((v) => v.name),
    views: views.length,
  };
  fs.writeFileSync(path.join(outDir, "meta"), canonicalJson(meta) + "\n");

  views.forEach((view, i) => {
    const lines = view.edges
      .map((e) => {
        const a = map.get(e.u)!;
        const b = map.get(e.v)!;
        const [u, v] = a < b ? [a, b] : [b, a];
        return { u, v, w: e.w };
      })
      .sort((x, y) => x.u - y.u || x.v - y.v)
      .map((e) => `${e.u} ${e.v} ${formatWeight(e.w)}`);
    fs.writeFileSync(path.join(outDir, `view_${i}.edges`),
      lines.length ? lines.join("\n") + "\n" : "");
  });

  if (labels && labels.size > 0) {
    const classId = new Map(classNames.map((c, i) => [c, i]));
    const rows = [...labels.entries()]
      .map(([id, label]) => ({ u: map.get(id)!, c: classId.get(label)! }))
      .sort((a, b) => a.u - b.u)
      .map((r) => `${r.u} ${r.c}`);
    fs.writeFileSync(path.join(outDir, "labels"), rows.join("\n") + "\n");
    const labelRows = classNames.map((c, i) => `${c}\t${i}`);
    fs.writeFileSync(path.join(outDir, "label_map.tsv"), labelRows.join("\n") + "\n");
  }

  const mapRows = [...map.entries()].sort((a, b) => a[1] - b[1])
    .map(([raw, dense]) => `${raw}\t${dense}`);
  fs.writeFileSync(path.join(outDir, "id_map.tsv"), mapRows.join("\n") + "\n");
}

/** Two-space-indented JSON with sorted keys (matches the primary's writer). */
export function canonicalJson(obj: unknown): string {
  return JSON.stringify(sortKeys(obj), null, 2);
}

function sortKeys(value: unknown): unknown {
  if (Array.isArray(value)) {
    return value.map(sortKeys);
  }
  if (value !== null && typeof value === "object") {
    const out: Record<string, unknown> = {};
    for (const key of Object.keys(value as Record<string, unknown>).sort()) {
      out[key] = sortKeys((value as Record<string, unknown>)[key]);
    }
    return out;
  }
  return value;
}
