import * as fs from "node:fs";
import * as os from "node:os";
import * as path from "node:path";
import { afterAll, beforeAll, describe, expect, it } from "vitest";
import { loadCsv, CsvError } from "../src/csv.js";
import { loadFigureSpec, FigSpecError } from "../src/figspec.js";
import { renderFigure } from "../src/render.js";
import { run } from "../src/main.js";

let dir: string;

function write(name: string, text: string): string {
  const p = path.join(dir, name);
  fs.mkdirSync(path.dirname(p), { recursive: true });
  fs.writeFileSync(p, text);
  return p;
}

function gridCsv(n = 8): string {
  const lines = ["x1,x2,value"];
  for (let i = 0; i < n; i++) {
    for (let j = 0; j < n; j++) {
      const x = -1 + (2 * i) / (n - 1);
      const y = -1 + (2 * j) / (n - 1);
      lines.push(`${x},${y},${-(x * x + y * y)}`);
    }
  }
  return lines.join("\n") + "\n";
}

function samplesCsv(n = 40, shift = 0): string {
  const lines = ["x1,x2"];
  for (let i = 0; i < n; i++) {
    lines.push(`${Math.sin(i * 2.39996) * 0.8 + shift},${Math.cos(i * 2.39996) * 0.8}`);
  }
  return lines.join("\n") + "\n";
}

function traceCsv(): string {
  const lines = ["iter,sigma_bucket,loss,grad_norm"];
  for (let it = 1; it <= 50; it++) {
    for (let b = 0; b < 4; b++) {
      lines.push(`${it},${b},${1 / it + b * 0.1},${0.5}`);
    }
  }
  return lines.join("\n") + "\n";
}

function asymmetryCsv(): string {
  const lines = ["sigma,raw_mean,raw_stderr,norm_mean,norm_stderr,n_points,n_probes"];
  for (let k = 0; k < 10; k++) {
    const sigma = 0.01 * Math.pow(1000, k / 9);
    lines.push(`${sigma},${1e-3 / sigma},${1e-5},${1e-4 / sigma},${1e-6},8,16`);
  }
  return lines.join("\n") + "\n";
}

beforeAll(() => {
  dir = fs.mkdtempSync(path.join(os.tmpdir(), "figtest-"));
});

afterAll(() => {
  fs.rmSync(dir, { recursive: true, force: true });
});

describe("csv contracts", () => {
  it("loads a well-formed samples csv", () => {
    const p = write("ok.csv", samplesCsv());
    const t = loadCsv(p, ["x1", "x2"]);
    expect(t.rows.length).toBe(40);
    expect(t.rows[0].x1).toBeTypeOf("number");
  });

  it("rejects a csv missing a required column, naming the path", () => {
    const p = write("bad.csv", "x1,value\n0,1\n");
    expect(() => loadCsv(p, ["x1", "x2"])).toThrow(CsvError);
    expect(() => loadCsv(p, ["x1", "x2"])).toThrow(/bad\.csv.*x2/);
  });

  it("rejects a missing file", () => {
    expect(() => loadCsv(path.join(dir, "nope.csv"), ["x1"])).toThrow(CsvError);
  });
});

describe("figure rendering", () => {
  it("renders a heatmap panel from a constant grid (uniform color)", () => {
    const grid = write("const.csv", "x1,x2,value\n0,0,1\n0,1,1\n1,0,1\n1,1,1\n");
    const spec = write("f1.json", JSON.stringify({
      rows: 1, cols: 1, panel_width: 80, panel_height: 80,
      panels: [{ kind: "heatmap", csv: grid, log_values: false }],
    }));
    const canvas = renderFigure(loadFigureSpec(spec));
    // all interior pixels share one color
    const inner: string[] = [];
    for (let y = 30; y < 50; y++) {
      for (let x = 30; x < 50; x++) {
        const i = (y * canvas.width + x) * 3;
        inner.push([...canvas.pixels.subarray(i, i + 3)].join(","));
      }
    }
    expect(new Set(inner).size).toBe(1);
  });

  it("renders a scatter overlay without a samples file (heatmap only)", () => {
    const grid = write("g.csv", gridCsv());
    const spec = write("f2.json", JSON.stringify({
      rows: 1, cols: 1,
      panels: [{ kind: "scatter_overlay", heatmap_csv: grid, title: "density" }],
    }));
    const canvas = renderFigure(loadFigureSpec(spec));
    expect(canvas.width).toBe(260);
  });

  it("renders an empty samples csv as heatmap only", () => {
    const grid = write("g2.csv", gridCsv());
    const empty = write("empty.csv", "x1,x2\n");
    const spec = write("f3.json", JSON.stringify({
      rows: 1, cols: 1,
      panels: [{ kind: "scatter_overlay", heatmap_csv: grid, samples_csv: empty }],
    }));
    expect(() => renderFigure(loadFigureSpec(spec))).not.toThrow();
  });

  it("renders truth faded and samples opaque", () => {
    const truth = write("truth.csv", samplesCsv(60, 0));
    const gen = write("gen.csv", samplesCsv(60, 0));
    const spec = write("f4.json", JSON.stringify({
      rows: 1, cols: 1,
      panels: [{ kind: "scatter_overlay", truth_csv: truth, samples_csv: gen }],
    }));
    const canvas = renderFigure(loadFigureSpec(spec));
    // orange (opaque samples) must appear; count orange-dominant pixels
    let orange = 0;
    for (let i = 0; i < canvas.pixels.length; i += 3) {
      if (canvas.pixels[i] > 200 && canvas.pixels[i + 1] > 100
          && canvas.pixels[i + 2] < 80) orange++;
    }
    expect(orange).toBeGreaterThan(10);
  });

  it("renders grouped loss traces and log-scale sweeps", () => {
    const trace = write("trace.csv", traceCsv());
    const asym = write("asym.csv", asymmetryCsv());
    const spec = write("f5.json", JSON.stringify({
      rows: 1, cols: 2,
      panels: [
        { kind: "line", csv: trace, x: "iter", y: "loss", group_by: "sigma_bucket" },
        { kind: "log_line", csv: asym, x: "sigma", y: "norm_mean" },
      ],
    }));
    const canvas = renderFigure(loadFigureSpec(spec));
    expect(canvas.width).toBe(520);
  });

  it("rejects more panels than layout slots", () => {
    const grid = write("g3.csv", gridCsv());
    const spec = write("f6.json", JSON.stringify({
      rows: 1, cols: 1,
      panels: [
        { kind: "heatmap", csv: grid },
        { kind: "heatmap", csv: grid },
      ],
    }));
    expect(() => loadFigureSpec(spec)).toThrow(FigSpecError);
  });

  it("is deterministic across renders", () => {
    const grid = write("g4.csv", gridCsv());
    const spec = write("f7.json", JSON.stringify({
      rows: 1, cols: 1, panels: [{ kind: "heatmap", csv: grid }],
    }));
    const a = renderFigure(loadFigureSpec(spec)).pixels;
    const b = renderFigure(loadFigureSpec(spec)).pixels;
    expect(Buffer.from(a).equals(Buffer.from(b))).toBe(true);
  });
});

describe("cli", () => {
  it("writes a png and returns 0", () => {
    const grid = write("g5.csv", gridCsv());
    const spec = write("f8.json", JSON.stringify({
      rows: 1, cols: 1, panels: [{ kind: "heatmap", csv: grid }],
    }));
    const out = path.join(dir, "out.png");
    expect(run([spec, out])).toBe(0);
    const head = fs.readFileSync(out).subarray(1, 4).toString("ascii");
    expect(head).toBe("PNG");
  });

  it("returns nonzero for a csv with a missing column", () => {
    const bad = write("badcol.csv", "x1,wrong\n0,0\n");
    const spec = write("f9.json", JSON.stringify({
      rows: 1, cols: 1, panels: [{ kind: "heatmap", csv: bad }],
    }));
    expect(run([spec, path.join(dir, "nope.png")])).toBe(1);
  });

  it("returns nonzero for usage errors", () => {
    expect(run([])).toBe(2);
  });
});
