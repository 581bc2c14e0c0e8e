/**
 * Minimal dense float64 matrix kernels for the reference model forward.
 * Row-major storage, plain loops; nothing here needs to be fast, it has
 * to be unambiguous.
 */

export interface Mat {
  rows: number;
  cols: number;
  data: Float64Array;
}

export function zeros(rows: number, cols: number): Mat {
  return { rows, cols, data: new Float64Array(rows * cols) };
}

export function fromData(rows: number, cols: number, data: Float64Array): Mat {
  if (data.length !== rows * cols) {
    throw new Error(`data length ${data.length} != ${rows}x${cols}`);
  }
  return { rows, cols, data };
}

export function clone(m: Mat): Mat {
  return { rows: m.rows, cols: m.cols, data: new Float64Array(m.data) };
}

export function at(m: Mat, i: number, j: number): number {
  return m.data[i * m.cols + j];
}

export function row(m: Mat, i: number): Float64Array {
  return m.data.subarray(i * m.cols, (i + 1) * m.cols);
}

export function matmul(a: Mat, b: Mat): Mat {
  if (a.cols !== b.rows) {
    throw new Error(`inner dims disagree: ${a.rows}x${a.cols} @ ${b.rows}x${b.cols}`);
  }
  const out = zeros(a.rows, b.cols);
  for (let i = 0; i < a.rows; i++) {
    for (let k = 0; k < a.cols; k++) {
      const aik = a.data[i * a.cols + k];
      if (aik === 0) continue;
      for (let j = 0; j < b.cols; j++) {
        out.data[i * b.cols + j] += aik * b.data[k * b.cols + j];
      }
    }
  }
  return out;
}

export function transpose(m: Mat): Mat {
  const out = zeros(m.cols, m.rows);
  for (let i = 0; i < m.rows; i++) {
    for (let j = 0; j < m.cols; j++) {
      out.data[j * m.rows + i] = m.data[i * m.cols + j];
    }
  }
  return out;
}

export function addInPlace(target: Mat, other: Mat): void {
  for (let i = 0; i < target.data.length; i++) target.data[i] += other.data[i];
}

export function scaleInPlace(m: Mat, factor: number): void {
  for (let i = 0; i < m.data.length; i++) m.data[i] *= factor;
}

export function addRowVectorInPlace(m: Mat, vec: Float64Array): void {
  for (let i = 0; i < m.rows; i++) {
    for (let j = 0; j < m.cols; j++) m.data[i * m.cols + j] += vec[j];
  }
}

/** Row-wise softmax, stabilized by the row maximum. */
export function rowSoftmax(m: Mat): Mat {
  const out = zeros(m.rows, m.cols);
  for (let i = 0; i < m.rows; i++) {
    let peak = -Infinity;
    for (let j = 0; j < m.cols; j++) peak = Math.max(peak, at(m, i, j));
    let total = 0;
    for (let j = 0; j < m.cols; j++) {
      const w = Math.exp(at(m, i, j) - peak);
      out.data[i * m.cols + j] = w;
      total += w;
    }
    for (let j = 0; j < m.cols; j++) out.data[i * m.cols + j] /= total;
  }
  return out;
}

export function layerNorm(m: Mat, gamma: Float64Array, beta: Float64Array,
                          eps = 1e-5): Mat {
  const out = zeros(m.rows, m.cols);
  for (let i = 0; i < m.rows; i++) {
    let mean = 0;
    for (let j = 0; j < m.cols; j++) mean += at(m, i, j);
    mean /= m.cols;
    let variance = 0;
    for (let j = 0; j < m.cols; j++) {
      const centered = at(m, i, j) - mean;
      variance += centered * centered;
    }
    variance /= m.cols;
    const inv = 1.0 / Math.sqrt(variance + eps);
    for (let j = 0; j < m.cols; j++) {
      out.data[i * m.cols + j] = (at(m, i, j) - mean) * inv * gamma[j] + beta[j];
    }
  }
  return out;
}

/** tanh-form GELU; only used inside encoder blocks, never compared. */
export function geluInPlace(m: Mat): void {
  const c = Math.sqrt(2.0 / Math.PI);
  for (let i = 0; i < m.data.length; i++) {
    const x = m.data[i];
    m.data[i] = 0.5 * x * (1.0 + Math.tanh(c * (x + 0.044715 * x * x * x)));
  }
}

export function cosineRows(a: Mat, b: Mat): Mat {
  if (a.cols !== b.cols) {
    throw new Error(`row dims disagree: ${a.cols} vs ${b.cols}`);
  }
  const out = zeros(a.rows, b.rows);
  const normOf = (m: Mat, i: number) => {
    let total = 0;
    for (let j = 0; j < m.cols; j++) total += at(m, i, j) ** 2;
    return Math.sqrt(total);
  };
  const bNorms = Array.from({ length: b.rows }, (_, j) => normOf(b, j));
  for (let i = 0; i < a.rows; i++) {
    const ai = normOf(a, i);
    for (let j = 0; j < b.rows; j++) {
      let dot = 0;
      for (let k = 0; k < a.cols; k++) dot += at(a, i, k) * at(b, j, k);
      out.data[i * b.rows + j] = dot / (ai * bNorms[j]);
    }
  }
  return out;
}

export function sliceCols(m: Mat, start: number, end: number): Mat {
  const width = end - start;
  const out = zeros(m.rows, width);
  for (let i = 0; i < m.rows; i++) {
    for (let j = 0; j < width; j++) {
      out.data[i * width + j] = m.data[i * m.cols + start + j];
    }
  }
  return out;
}

export function dropFirstRow(m: Mat): Mat {
  return fromData(m.rows - 1, m.cols, m.data.slice(m.cols));
}
