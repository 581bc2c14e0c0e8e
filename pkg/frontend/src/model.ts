/**
 * A small self-contained vision-language reference model.
 *
 * Weights are synthetic but fully deterministic: every tensor draws
 * from its own PRNG seeded by `fnv1a("<model id>|<tensor name>")`, so a
 * model id pins the whole network bit for bit. The vision tower is a
 * pre-LN ViT (CLS token, learned position embeddings, multi-head
 * attention in every encoder block). The final block is evaluated in
 * fused single-map form: per-head scaled attention logits are averaged
 * into one LxL map which attends the full-width value matrix, the
 * residual and feed-forward are dropped, and the block output goes
 * straight through the joint projection. That is exactly the
 * computation the downstream engine performs, with
 * tau = heads * sqrt(embedDim / heads).
 *
 * The text tower is a deterministic embedding table: each class name
 * hashes to a PRNG that emits a unit-norm joint-space vector.
 */

import {
  Mat,
  addInPlace,
  addRowVectorInPlace,
  cosineRows,
  dropFirstRow,
  fromData,
  geluInPlace,
  layerNorm,
  matmul,
  row,
  rowSoftmax,
  scaleInPlace,
  sliceCols,
  transpose,
  zeros,
} from "./matrix.js";
import { Rng, fnv1a } from "./prng.js";
import { RgbImage } from "./image.js";

export interface VlmConfig {
  id: string;
  imageSize: number;
  patchSize: number;
  embedDim: number;
  heads: number;
  layers: number;
  hiddenDim: number;
  jointDim: number;
}

export const MODEL_ZOO: Record<string, VlmConfig> = {
  "tiny-vlm-b8": {
    id: "tiny-vlm-b8", imageSize: 64, patchSize: 8,
    embedDim: 48, heads: 4, layers: 3, hiddenDim: 96, jointDim: 32,
  },
  "tiny-vlm-b16": {
    id: "tiny-vlm-b16", imageSize: 64, patchSize: 16,
    embedDim: 48, heads: 4, layers: 3, hiddenDim: 96, jointDim: 32,
  },
  "tiny-vfm-b8": {
    id: "tiny-vfm-b8", imageSize: 64, patchSize: 8,
    embedDim: 32, heads: 2, layers: 2, hiddenDim: 64, jointDim: 16,
  },
  "tiny-vfm-b16": {
    id: "tiny-vfm-b16", imageSize: 64, patchSize: 16,
    embedDim: 32, heads: 2, layers: 2, hiddenDim: 64, jointDim: 16,
  },
};

export function resolveModel(id: string): VlmConfig {
  const config = MODEL_ZOO[id];
  if (!config) {
    throw new Error(`unknown model ${JSON.stringify(id)}; known: ${Object.keys(MODEL_ZOO).join(", ")}`);
  }
  return config;
}

interface BlockWeights {
  ln1Gamma: Float64Array;
  ln1Beta: Float64Array;
  wq: Mat;
  wk: Mat;
  wv: Mat;
  proj: Mat;
  ln2Gamma: Float64Array;
  ln2Beta: Float64Array;
  ffnW1: Mat;
  ffnB1: Float64Array;
  ffnW2: Mat;
  ffnB2: Float64Array;
}

export interface ForwardResult {
  /** Post-LN tokens entering the fused final block, CLS dropped (L x v). */
  tokens: Mat;
  /** The fused final attention map (L x L, row-stochastic). */
  attention: Mat;
  /** Joint-space patch features (L x d). */
  jointFeatures: Mat;
  gridRows: number;
  gridCols: number;
}

export class TinyVlm {
  readonly config: VlmConfig;
  readonly patchEmbed: Mat;
  readonly clsToken: Float64Array;
  readonly posEmbed: Mat;
  readonly blocks: BlockWeights[];
  readonly finalLnGamma: Float64Array;
  readonly finalLnBeta: Float64Array;
  readonly jointProj: Mat;
  readonly tau: number;

  constructor(config: VlmConfig) {
    this.config = config;
    const v = config.embedDim;
    const patchDim = config.patchSize * config.patchSize * 3;
    const grid = config.imageSize / config.patchSize;
    if (!Number.isInteger(grid)) {
      throw new Error(`image size ${config.imageSize} not divisible by patch ${config.patchSize}`);
    }
    const numPatches = grid * grid;

    const draw = (name: string, rows: number, cols: number, std: number): Mat =>
      fromData(rows, cols, new Rng(fnv1a(`${config.id}|${name}`)).gaussianArray(rows * cols, std));
    const drawVec = (name: string, length: number, std: number, shift = 0): Float64Array => {
      const out = new Rng(fnv1a(`${config.id}|${name}`)).gaussianArray(length, std);
      for (let i = 0; i < out.length; i++) out[i] += shift;
      return out;
    };

    this.patchEmbed = draw("patch_embed", patchDim, v, 1.0 / Math.sqrt(patchDim));
    this.clsToken = drawVec("cls_token", v, 0.02);
    this.posEmbed = draw("pos_embed", numPatches + 1, v, 0.02);
    this.blocks = [];
    for (let b = 0; b < config.layers; b++) {
      this.blocks.push({
        ln1Gamma: drawVec(`block${b}.ln1.gamma`, v, 0.05, 1.0),
        ln1Beta: drawVec(`block${b}.ln1.beta`, v, 0.05),
        wq: draw(`block${b}.wq`, v, v, 1.0 / Math.sqrt(v)),
        wk: draw(`block${b}.wk`, v, v, 1.0 / Math.sqrt(v)),
        wv: draw(`block${b}.wv`, v, v, 1.0 / Math.sqrt(v)),
        proj: draw(`block${b}.proj`, v, v, 1.0 / Math.sqrt(v)),
        ln2Gamma: drawVec(`block${b}.ln2.gamma`, v, 0.05, 1.0),
        ln2Beta: drawVec(`block${b}.ln2.beta`, v, 0.05),
        ffnW1: draw(`block${b}.ffn.w1`, v, config.hiddenDim, 1.0 / Math.sqrt(v)),
        ffnB1: drawVec(`block${b}.ffn.b1`, config.hiddenDim, 0.02),
        ffnW2: draw(`block${b}.ffn.w2`, config.hiddenDim, v, 1.0 / Math.sqrt(config.hiddenDim)),
        ffnB2: drawVec(`block${b}.ffn.b2`, v, 0.02),
      });
    }
    this.finalLnGamma = drawVec("final_ln.gamma", v, 0.05, 1.0);
    this.finalLnBeta = drawVec("final_ln.beta", v, 0.05);
    this.jointProj = draw("joint_proj", v, config.jointDim, 1.0 / Math.sqrt(v));
    this.tau = config.heads * Math.sqrt(v / config.heads);
  }

  get gridSize(): number {
    return this.config.imageSize / this.config.patchSize;
  }

  get finalBlock(): BlockWeights {
    return this.blocks[this.config.layers - 1];
  }

  patchify(image: RgbImage): Mat {
    const { imageSize, patchSize } = this.config;
    if (image.width !== imageSize || image.height !== imageSize) {
      throw new Error(
        `model ${this.config.id} expects ${imageSize}x${imageSize} input, ` +
        `got ${image.width}x${image.height}`,
      );
    }
    const grid = this.gridSize;
    const patchDim = patchSize * patchSize * 3;
    const out = zeros(grid * grid, patchDim);
    for (let py = 0; py < grid; py++) {
      for (let px = 0; px < grid; px++) {
        const target = row(out, py * grid + px);
        let t = 0;
        for (let y = 0; y < patchSize; y++) {
          for (let x = 0; x < patchSize; x++) {
            const src = ((py * patchSize + y) * image.width + px * patchSize + x) * 3;
            for (let c = 0; c < 3; c++) {
              target[t++] = (image.data[src + c] - 0.5) / 0.5;
            }
          }
        }
      }
    }
    return out;
  }

  private multiHeadAttention(tokens: Mat, w: BlockWeights): Mat {
    const { heads, embedDim } = this.config;
    const headDim = embedDim / heads;
    const q = matmul(tokens, w.wq);
    const k = matmul(tokens, w.wk);
    const v = matmul(tokens, w.wv);
    const context = zeros(tokens.rows, embedDim);
    for (let h = 0; h < heads; h++) {
      const qh = sliceCols(q, h * headDim, (h + 1) * headDim);
      const kh = sliceCols(k, h * headDim, (h + 1) * headDim);
      const vh = sliceCols(v, h * headDim, (h + 1) * headDim);
      const scores = matmul(qh, transpose(kh));
      scaleInPlace(scores, 1.0 / Math.sqrt(headDim));
      const ctx = matmul(rowSoftmax(scores), vh);
      for (let i = 0; i < tokens.rows; i++) {
        for (let j = 0; j < headDim; j++) {
          context.data[i * embedDim + h * headDim + j] = ctx.data[i * headDim + j];
        }
      }
    }
    return matmul(context, w.proj);
  }

  private encoderBlock(x: Mat, w: BlockWeights): Mat {
    const attended = this.multiHeadAttention(layerNorm(x, w.ln1Gamma, w.ln1Beta), w);
    addInPlace(attended, x);
    const hidden = matmul(layerNorm(attended, w.ln2Gamma, w.ln2Beta), w.ffnW1);
    addRowVectorInPlace(hidden, w.ffnB1);
    geluInPlace(hidden);
    const ffnOut = matmul(hidden, w.ffnW2);
    addRowVectorInPlace(ffnOut, w.ffnB2);
    addInPlace(ffnOut, attended);
    return ffnOut;
  }

  private embed(image: RgbImage): Mat {
    const patches = matmul(this.patchify(image), this.patchEmbed);
    const withCls = zeros(patches.rows + 1, this.config.embedDim);
    withCls.data.set(this.clsToken, 0);
    withCls.data.set(patches.data, this.config.embedDim);
    addInPlace(withCls, this.posEmbed);
    return withCls;
  }

  /**
   * Full forward up to joint-space patch features. Encoder blocks run
   * with true multi-head attention; the last block runs fused
   * (mean-of-scaled-logits map, full-width values, no residual/FFN,
   * no post layer norm before the joint projection).
   */
  forward(image: RgbImage): ForwardResult {
    let x = this.embed(image);
    for (let b = 0; b < this.config.layers - 1; b++) {
      x = this.encoderBlock(x, this.blocks[b]);
    }
    const final = this.finalBlock;
    const tokens = layerNorm(dropFirstRow(x), final.ln1Gamma, final.ln1Beta);
    const q = matmul(tokens, final.wq);
    const k = matmul(tokens, final.wk);
    const scores = matmul(q, transpose(k));
    scaleInPlace(scores, 1.0 / this.tau);
    const attention = rowSoftmax(scores);
    const context = matmul(attention, matmul(tokens, final.wv));
    const jointFeatures = matmul(matmul(context, final.proj), this.jointProj);
    return {
      tokens,
      attention,
      jointFeatures,
      gridRows: this.gridSize,
      gridCols: this.gridSize,
    };
  }

  /** Dense per-patch class logits: cosine of joint features vs text. */
  denseLogits(image: RgbImage, classNames: string[]): Mat {
    return cosineRows(this.forward(image).jointFeatures, this.textEmbeddings(classNames));
  }

  textEmbedding(className: string): Float64Array {
    const rng = new Rng(fnv1a(`${this.config.id}|text|${className}`));
    const raw = rng.gaussianArray(this.config.jointDim);
    let norm = 0;
    for (const value of raw) norm += value * value;
    norm = Math.sqrt(norm);
    for (let i = 0; i < raw.length; i++) raw[i] /= norm;
    return raw;
  }

  textEmbeddings(classNames: string[]): Mat {
    if (classNames.length === 0) throw new Error("class list is empty");
    const out = zeros(classNames.length, this.config.jointDim);
    classNames.forEach((name, i) => out.data.set(this.textEmbedding(name), i * this.config.jointDim));
    return out;
  }

  /**
   * Patch features for external-attention use: all blocks run as full
   * encoder blocks, final layer norm applied, CLS dropped.
   */
  patchFeatures(image: RgbImage): Mat {
    let x = this.embed(image);
    for (const block of this.blocks) {
      x = this.encoderBlock(x, block);
    }
    return layerNorm(dropFirstRow(x), this.finalLnGamma, this.finalLnBeta);
  }

  /** Row-stochastic feature-correspondence attention map (L x L). */
  correspondenceAttention(image: RgbImage): Mat {
    const features = this.patchFeatures(image);
    const scores = matmul(features, transpose(features));
    scaleInPlace(scores, 1.0 / Math.sqrt(this.config.embedDim));
    return rowSoftmax(scores);
  }
}
