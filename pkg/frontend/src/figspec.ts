/**
 * Figure specification: a grid of panels, each binding CSV artifacts to a
 * plot kind.  Specs are small JSON files checked into the repository, one
 * per figure, so figure generation is a pure pipeline over CLI outputs.
 */

import * as fs from "node:fs";
import * as path from "node:path";
import { z } from "zod";

const panelSchema = z.discriminatedUnion("kind", [
  z.object({
    kind: z.literal("heatmap"),
    csv: z.string(),
    title: z.string().default(""),
    // the value column holds log-density; rendering exponentiates after
    // subtracting the max when true
    log_values: z.boolean().default(true),
  }),
  z.object({
    kind: z.literal("scatter_overlay"),
    title: z.string().default(""),
    heatmap_csv: z.string().optional(),
    truth_csv: z.string().optional(),
    samples_csv: z.string().optional(),
    log_values: z.boolean().default(true),
    extent: z.tuple([z.number(), z.number(), z.number(), z.number()]).optional(),
  }),
  z.object({
    kind: z.literal("line"),
    csv: z.string(),
    x: z.string(),
    y: z.string(),
    group_by: z.string().optional(),
    title: z.string().default(""),
  }),
  z.object({
    kind: z.literal("log_line"),
    csv: z.string(),
    x: z.string(),
    y: z.string(),
    group_by: z.string().optional(),
    log_x: z.boolean().default(true),
    title: z.string().default(""),
  }),
]);

const figureSchema = z.object({
  rows: z.number().int().positive(),
  cols: z.number().int().positive(),
  panel_width: z.number().int().positive().default(260),
  panel_height: z.number().int().positive().default(260),
  panels: z.array(panelSchema).min(1),
});

export type PanelSpec = z.infer<typeof panelSchema>;
export type FigureSpec = z.infer<typeof figureSchema>;

export class FigSpecError extends Error {}

/** Loads a figure spec; CSV paths are resolved relative to baseDir. */
export function loadFigureSpec(specPath: string, baseDir?: string): FigureSpec {
  let raw: unknown;
  try {
    raw = JSON.parse(fs.readFileSync(specPath, "utf8"));
  } catch (e) {
    throw new FigSpecError(`${specPath}: ${(e as Error).message}`);
  }
  const result = figureSchema.safeParse(raw);
  if (!result.success) {
    throw new FigSpecError(`${specPath}: ${result.error.issues[0].path.join(".")}: `
      + result.error.issues[0].message);
  }
  const spec = result.data;
  if (spec.panels.length > spec.rows * spec.cols) {
    throw new FigSpecError(`${specPath}: ${spec.panels.length} panels exceed `
      + `${spec.rows}x${spec.cols} layout`);
  }
  const base = baseDir ?? path.dirname(specPath);
  for (const panel of spec.panels) {
    for (const key of ["csv", "heatmap_csv", "truth_csv", "samples_csv"] as const) {
      const p = (panel as Record<string, unknown>)[key];
      if (typeof p === "string" && !path.isAbsolute(p)) {
        (panel as Record<string, unknown>)[key] = path.join(base, p);
      }
    }
  }
  return spec;
}
