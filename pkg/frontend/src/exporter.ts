/**
 * Turns a reference model plus an image into the tensor bundle the
 * engine consumes: patch tokens, final-block weights, text embeddings,
 * an optional external attention map, a run config, and a manifest
 * documenting every convention baked into the export.
 */

import { join } from "node:path";
import { Mat } from "./matrix.js";
import { writeFileAtomic, writeTensorFile } from "./fsat.js";
import { RgbImage, readImage } from "./image.js";
import { TinyVlm, resolveModel } from "./model.js";

export interface ExportOptions {
  /** Attention mode written into the engine config. */
  attentionMode?: "qk" | "external";
  /** Model id supplying the external attention map (required for external). */
  vfmId?: string;
}

export interface ExportManifest {
  modelId: string;
  imagePath: string;
  classNames: string[];
  gridRows: number;
  gridCols: number;
  headFusion: string;
  layerNormPlacement: string;
  files: string[];
}

const HEAD_FUSION_RULE =
  "mean over per-head scaled attention logits (tau = heads * sqrt(embedDim / heads))";
const LN_PLACEMENT =
  "final-block pre-attention layer norm folded into exported tokens; " +
  "residual/FFN dropped in the fused final block; no post layer norm before joint projection";

function writeMat(path: string, m: Mat): void {
  writeTensorFile(path, [m.rows, m.cols], m.data);
}

export function exportImageTensors(modelId: string, image: RgbImage,
                                   outDir: string): { files: string[]; tokens: Mat; gridRows: number; gridCols: number } {
  const model = new TinyVlm(resolveModel(modelId));
  const result = model.forward(image);
  const final = model.finalBlock;
  const files: string[] = [];
  const emit = (rel: string, write: (path: string) => void) => {
    write(join(outDir, rel));
    files.push(rel);
  };
  emit("tokens.fsat", (p) => writeMat(p, result.tokens));
  emit("weights/w_q.fsat", (p) => writeMat(p, final.wq));
  emit("weights/w_k.fsat", (p) => writeMat(p, final.wk));
  emit("weights/w_v.fsat", (p) => writeMat(p, final.wv));
  emit("weights/proj.fsat", (p) => writeMat(p, final.proj));
  emit("weights/ffn_w1.fsat", (p) => writeMat(p, final.ffnW1));
  emit("weights/ffn_b1.fsat", (p) => writeTensorFile(p, [final.ffnB1.length], final.ffnB1));
  emit("weights/ffn_w2.fsat", (p) => writeMat(p, final.ffnW2));
  emit("weights/ffn_b2.fsat", (p) => writeTensorFile(p, [final.ffnB2.length], final.ffnB2));
  emit("weights/joint_proj.fsat", (p) => writeMat(p, model.jointProj));
  emit("weights/tau.fsat", (p) => writeTensorFile(p, [], [model.tau]));
  return { files, tokens: result.tokens, gridRows: result.gridRows, gridCols: result.gridCols };
}

export function exportTextEmbeddings(modelId: string, classNames: string[],
                                     outPath: string): Mat {
  if (classNames.length === 0) throw new Error("class list is empty");
  const model = new TinyVlm(resolveModel(modelId));
  const embeddings = model.textEmbeddings(classNames);
  writeMat(outPath, embeddings);
  return embeddings;
}

export function exportExternalAttention(vfmId: string, modelId: string,
                                        image: RgbImage, outPath: string): Mat {
  const vfm = new TinyVlm(resolveModel(vfmId));
  const model = new TinyVlm(resolveModel(modelId));
  if (vfm.gridSize !== model.gridSize) {
    throw new Error(
      `grid mismatch: ${vfmId} produces ${vfm.gridSize}x${vfm.gridSize} patches ` +
      `but ${modelId} expects ${model.gridSize}x${model.gridSize}`,
    );
  }
  const attention = vfm.correspondenceAttention(image);
  writeMat(outPath, attention);
  return attention;
}

export function manifestToText(manifest: ExportManifest): string {
  return [
    `model = ${manifest.modelId}`,
    `image = ${manifest.imagePath}`,
    `classes = ${manifest.classNames.join(", ")}`,
    `grid = ${manifest.gridRows}x${manifest.gridCols}`,
    `head_fusion = ${manifest.headFusion}`,
    `layer_norms = ${manifest.layerNormPlacement}`,
    ...manifest.files.map((f) => `file = ${f}`),
  ].join("\n") + "\n";
}

function engineConfigText(options: ExportOptions): string {
  const lines = [
    "tokens = tokens.fsat",
    "weights = weights",
    "text = text.fsat",
    "output_dir = out",
    `attention_mode = ${options.attentionMode ?? "qk"}`,
  ];
  if ((options.attentionMode ?? "qk") === "external") {
    lines.push("external_attention = attention.fsat");
  }
  lines.push("use_residual = false", "use_ffn = false");
  return lines.join("\n") + "\n";
}

/**
 * One-call export of everything the engine run needs. Returns the
 * manifest; throws on unknown models, empty class lists, or grid
 * mismatches before any manifest is written.
 */
export function exportAll(modelId: string, imagePath: string, classNames: string[],
                          outDir: string, options: ExportOptions = {}): ExportManifest {
  const image = readImage(imagePath);
  const mode = options.attentionMode ?? "qk";
  if (mode === "external" && !options.vfmId) {
    throw new Error("external attention mode requires a vfm id");
  }
  const exported = exportImageTensors(modelId, image, outDir);
  const files = [...exported.files];
  exportTextEmbeddings(modelId, classNames, join(outDir, "text.fsat"));
  files.push("text.fsat");
  if (mode === "external") {
    exportExternalAttention(options.vfmId as string, modelId, image,
                            join(outDir, "attention.fsat"));
    files.push("attention.fsat");
  }
  writeFileAtomic(join(outDir, "config.txt"), engineConfigText(options));
  files.push("config.txt");
  const manifest: ExportManifest = {
    modelId,
    imagePath,
    classNames,
    gridRows: exported.gridRows,
    gridCols: exported.gridCols,
    headFusion: HEAD_FUSION_RULE,
    layerNormPlacement: LN_PLACEMENT,
    files,
  };
  writeFileAtomic(join(outDir, "manifest.txt"), manifestToText(manifest));
  return manifest;
}
