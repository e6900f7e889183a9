/**
 * CLI: render one figure spec to a PNG.
 *
 *   node dist/main.js <figspec.json> <output.png> [--base <dir>]
 *
 * CSV paths inside the spec resolve relative to --base (default: the spec
 * file's directory).  A missing or ill-formed CSV exits nonzero naming the
 * offending path.
 */

import * as fs from "node:fs";
import * as path from "node:path";
import { CsvError } from "./csv.js";
import { FigSpecError, loadFigureSpec } from "./figspec.js";
import { encodePng } from "./png.js";
import { renderFigure } from "./render.js";

export function run(argv: string[]): number {
  const args = argv.filter((a) => a !== "--base");
  const baseIdx = argv.indexOf("--base");
  const base = baseIdx >= 0 ? argv[baseIdx + 1] : undefined;
  const positional = base !== undefined
    ? argv.filter((a, i) => a !== "--base" && i !== baseIdx + 1)
    : args;
  if (positional.length !== 2) {
    console.error("usage: render <figspec.json> <output.png> [--base <dir>]");
    return 2;
  }
  const [specPath, outPath] = positional;
  try {
    const spec = loadFigureSpec(specPath, base);
    const canvas = renderFigure(spec);
    const png = encodePng(canvas.width, canvas.height, canvas.pixels);
    fs.mkdirSync(path.dirname(path.resolve(outPath)), { recursive: true });
    fs.writeFileSync(outPath, png);
    console.log(`wrote ${outPath} (${canvas.width}x${canvas.height})`);
    return 0;
  } catch (e) {
    if (e instanceof CsvError || e instanceof FigSpecError) {
      console.error(e.message);
      return 1;
    }
    throw e;
  }
}

const invokedDirectly = process.argv[1] !== undefined
  && path.resolve(process.argv[1]) === new URL(import.meta.url).pathname;
if (invokedDirectly) {
  process.exit(run(process.argv.slice(2)));
}
