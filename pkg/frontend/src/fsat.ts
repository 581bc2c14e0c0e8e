/**
 * FSAT tensor files, byte-compatible with the engine.
 *
 * Layout (little-endian): magic "FSAT" | u32 version=1 | u32 dtype
 * (0 = float32 LE) | u32 ndim | ndim x u64 dims | row-major float32
 * payload. Writers are atomic (temp file + rename) and refuse
 * non-finite values; read -> write reproduces a file byte for byte.
 */

import { mkdirSync, readFileSync, renameSync, writeFileSync } from "node:fs";
import { dirname, join } from "node:path";

export const FSAT_MAGIC = "FSAT";
export const FSAT_VERSION = 1;
export const FSAT_DTYPE_F32 = 0;

export class TensorFormatError extends Error {}
export class BadMagicError extends TensorFormatError {}
export class VersionMismatchError extends TensorFormatError {}
export class TruncatedPayloadError extends TensorFormatError {}
export class NonFiniteValueError extends TensorFormatError {}

export interface Tensor {
  shape: number[];
  data: Float64Array;
}

export function encodeTensor(shape: number[], values: ArrayLike<number>): Buffer {
  const count = shape.reduce((acc, d) => acc * d, 1);
  if (values.length !== count) {
    throw new TensorFormatError(
      `value count ${values.length} does not match shape [${shape.join(", ")}]`,
    );
  }
  for (let i = 0; i < values.length; i++) {
    if (!Number.isFinite(values[i])) {
      throw new NonFiniteValueError(`refusing to encode non-finite value at ${i}`);
    }
  }
  const header = Buffer.alloc(16 + 8 * shape.length);
  header.write(FSAT_MAGIC, 0, "ascii");
  header.writeUInt32LE(FSAT_VERSION, 4);
  header.writeUInt32LE(FSAT_DTYPE_F32, 8);
  header.writeUInt32LE(shape.length, 12);
  shape.forEach((dim, i) => {
    if (dim < 1) throw new TensorFormatError(`zero-sized dimension in [${shape}]`);
    header.writeBigUInt64LE(BigInt(dim), 16 + 8 * i);
  });
  const payload = Buffer.alloc(4 * count);
  for (let i = 0; i < count; i++) payload.writeFloatLE(Math.fround(values[i]), 4 * i);
  return Buffer.concat([header, payload]);
}

export function decodeTensor(blob: Buffer): Tensor {
  if (blob.length < 16) {
    throw new TruncatedPayloadError(`header needs 16 bytes, got ${blob.length}`);
  }
  if (blob.toString("ascii", 0, 4) !== FSAT_MAGIC) {
    throw new BadMagicError(`bad magic ${JSON.stringify(blob.toString("ascii", 0, 4))}`);
  }
  const version = blob.readUInt32LE(4);
  if (version !== FSAT_VERSION) {
    throw new VersionMismatchError(`unsupported version ${version}`);
  }
  const dtype = blob.readUInt32LE(8);
  if (dtype !== FSAT_DTYPE_F32) {
    throw new VersionMismatchError(`unsupported dtype code ${dtype}`);
  }
  const ndim = blob.readUInt32LE(12);
  const dimsEnd = 16 + 8 * ndim;
  if (blob.length < dimsEnd) {
    throw new TruncatedPayloadError("header truncated inside dims");
  }
  const shape: number[] = [];
  let count = 1;
  for (let i = 0; i < ndim; i++) {
    const dim = Number(blob.readBigUInt64LE(16 + 8 * i));
    if (dim < 1) throw new TruncatedPayloadError(`zero-sized dimension ${dim}`);
    shape.push(dim);
    count *= dim;
  }
  if (blob.length !== dimsEnd + 4 * count) {
    throw new TruncatedPayloadError(
      `payload is ${blob.length - dimsEnd} bytes, dims [${shape}] need ${4 * count}`,
    );
  }
  const data = new Float64Array(count);
  for (let i = 0; i < count; i++) {
    const value = blob.readFloatLE(dimsEnd + 4 * i);
    if (!Number.isFinite(value)) {
      throw new NonFiniteValueError(`payload contains non-finite value at ${i}`);
    }
    data[i] = value;
  }
  return { shape, data };
}

export function writeTensorFile(path: string, shape: number[],
                                values: ArrayLike<number>): void {
  writeFileAtomic(path, encodeTensor(shape, values));
}

export function readTensorFile(path: string): Tensor {
  return decodeTensor(readFileSync(path));
}

export function writeFileAtomic(path: string, content: Buffer | string): void {
  mkdirSync(dirname(path), { recursive: true });
  const tmp = join(dirname(path), `.${process.pid}.${Math.random().toString(36).slice(2)}.tmp`);
  writeFileSync(tmp, content);
  renameSync(tmp, path);
}
