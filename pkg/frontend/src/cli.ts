#!/usr/bin/env node
/**
 * vlm-export: extract reference-model tensors into FSAT files.
 *
 *   vlm-export synth-image --out scene.ppm [--size 64] [--seed 7]
 *   vlm-export export --model tiny-vlm-b8 --image scene.ppm \
 *       --classes "grass,cat,sky" --out bundle [--external --vfm tiny-vfm-b8]
 *   vlm-export text --model tiny-vlm-b8 --classes "a,b" --out text.fsat
 *   vlm-export attention --vfm tiny-vfm-b8 --model tiny-vlm-b8 \
 *       --image scene.ppm --out attention.fsat
 */

import { readImage, syntheticScene, writeImage } from "./image.js";
import { exportAll, exportExternalAttention, exportTextEmbeddings } from "./exporter.js";

function parseArgs(argv: string[]): { command: string; flags: Map<string, string> } {
  const [command, ...rest] = argv;
  const flags = new Map<string, string>();
  for (let i = 0; i < rest.length; i++) {
    const arg = rest[i];
    if (!arg.startsWith("--")) throw new Error(`unexpected argument ${arg}`);
    const key = arg.slice(2);
    if (key === "external") {
      flags.set(key, "true");
    } else {
      const value = rest[++i];
      if (value === undefined) throw new Error(`flag --${key} needs a value`);
      flags.set(key, value);
    }
  }
  return { command: command ?? "", flags };
}

function need(flags: Map<string, string>, key: string): string {
  const value = flags.get(key);
  if (!value) throw new Error(`missing required flag --${key}`);
  return value;
}

function classList(raw: string): string[] {
  const names = raw.split(",").map((s) => s.trim()).filter(Boolean);
  if (names.length === 0) throw new Error("class list is empty");
  return names;
}

export function main(argv: string[]): number {
  const { command, flags } = parseArgs(argv);
  switch (command) {
    case "synth-image": {
      const size = parseInt(flags.get("size") ?? "64", 10);
      const seed = parseInt(flags.get("seed") ?? "7", 10);
      writeImage(need(flags, "out"), syntheticScene(size, size, seed));
      console.log(`wrote ${flags.get("out")} (${size}x${size}, seed ${seed})`);
      return 0;
    }
    case "export": {
      const manifest = exportAll(
        need(flags, "model"),
        need(flags, "image"),
        classList(need(flags, "classes")),
        need(flags, "out"),
        flags.get("external")
          ? { attentionMode: "external", vfmId: need(flags, "vfm") }
          : {},
      );
      console.log(`exported ${manifest.files.length} files to ${flags.get("out")} ` +
                  `(grid ${manifest.gridRows}x${manifest.gridCols})`);
      return 0;
    }
    case "text": {
      exportTextEmbeddings(need(flags, "model"), classList(need(flags, "classes")),
                           need(flags, "out"));
      console.log(`wrote ${flags.get("out")}`);
      return 0;
    }
    case "attention": {
      exportExternalAttention(need(flags, "vfm"), need(flags, "model"),
                              readImage(need(flags, "image")), need(flags, "out"));
      console.log(`wrote ${flags.get("out")}`);
      return 0;
    }
    default:
      console.error("usage: vlm-export <synth-image|export|text|attention> [flags]");
      return 2;
  }
}

const isDirectRun = process.argv[1]?.endsWith("cli.js")
  || process.argv[1]?.endsWith("cli.ts")
  || process.argv[1]?.endsWith("vlm-export");
if (isDirectRun) {
  try {
    process.exit(main(process.argv.slice(2)));
  } catch (error) {
    console.error(`error: ${(error as Error).message}`);
    process.exit(1);
  }
}
