/**
 * Feature backbones behind a two-function adapter: anything that can turn
 * an image into a channel-last feature grid (and a global descriptor) can
 * replace the built-in one, e.g. a tfjs graph model's final conv layer.
 *
 * The built-in backbone ships fixed weights generated from a constant seed:
 * per-patch color/gradient statistics projected through a random matrix
 * with a ReLU, which keeps activations non-negative and the output
 * deterministic across runs and machines.
 */

import { RgbImage, luminance } from './image'
import { FeatureTensor } from './format'

export interface FeatureBackbone {
  name: string
  channels: number
  extract(image: RgbImage): FeatureTensor
}

const BUILTIN_SEED = 0x5eed1234
const STAT_COUNT = 8

/** mulberry32: small deterministic PRNG for the shipped projection weights */
function mulberry32(seed: number): () => number {
  let a = seed >>> 0
  return () => {
    a = (a + 0x6d2b79f5) >>> 0
    let t = a
    t = Math.imul(t ^ (t >>> 15), t | 1)
    t ^= t + Math.imul(t ^ (t >>> 7), t | 61)
    return ((t ^ (t >>> 14)) >>> 0) / 4294967296
  }
}

function projectionWeights(channels: number): { w: Float64Array; b: Float64Array } {
  const rand = mulberry32(BUILTIN_SEED)
  const w = new Float64Array(channels * STAT_COUNT)
  const b = new Float64Array(channels)
  for (let i = 0; i < w.length; i++) w[i] = (rand() - 0.5) * 2
  for (let i = 0; i < b.length; i++) b[i] = rand() * 0.2
  return { w, b }
}

function patchStats(img: RgbImage, x0: number, y0: number, size: number): Float64Array {
  const stats = new Float64Array(STAT_COUNT)
  let sumR = 0
  let sumG = 0
  let sumB = 0
  let sumL = 0
  let sumL2 = 0
  let gradX = 0
  let gradY = 0
  let maxL = 0
  let minL = 1
  let n = 0
  for (let y = y0; y < y0 + size; y++) {
    for (let x = x0; x < x0 + size; x++) {
      const i = (y * img.width + x) * 3
      sumR += img.data[i]
      sumG += img.data[i + 1]
      sumB += img.data[i + 2]
      const l = luminance(img, x, y)
      sumL += l
      sumL2 += l * l
      if (l > maxL) maxL = l
      if (l < minL) minL = l
      if (x + 1 < x0 + size) gradX += Math.abs(luminance(img, x + 1, y) - l)
      if (y + 1 < y0 + size) gradY += Math.abs(luminance(img, x, y + 1) - l)
      n++
    }
  }
  const meanL = sumL / n
  stats[0] = sumR / n
  stats[1] = sumG / n
  stats[2] = sumB / n
  stats[3] = Math.sqrt(Math.max(sumL2 / n - meanL * meanL, 0))
  stats[4] = gradX / n
  stats[5] = gradY / n
  stats[6] = maxL
  stats[7] = maxL - minL
  return stats
}

export function builtinBackbone(channels = 16, stride = 8): FeatureBackbone {
  const { w, b } = projectionWeights(channels)
  return {
    name: `builtin-v1-c${channels}-s${stride}`,
    channels,
    extract(image: RgbImage): FeatureTensor {
      const gw = Math.floor(image.width / stride)
      const gh = Math.floor(image.height / stride)
      if (gw < 1 || gh < 1) {
        throw new Error(`image ${image.width}x${image.height} smaller than stride ${stride}`)
      }
      const values = new Float32Array(gh * gw * channels)
      for (let gy = 0; gy < gh; gy++) {
        for (let gx = 0; gx < gw; gx++) {
          const stats = patchStats(image, gx * stride, gy * stride, stride)
          const base = (gy * gw + gx) * channels
          for (let c = 0; c < channels; c++) {
            let acc = b[c]
            for (let s = 0; s < STAT_COUNT; s++) acc += w[c * STAT_COUNT + s] * stats[s]
            values[base + c] = acc > 0 ? acc : 0 // float32 on store
          }
        }
      }
      return {
        height: gh,
        width: gw,
        channels,
        sourceWidth: image.width,
        sourceHeight: image.height,
        values,
      }
    },
  }
}

/**
 * GeM global descriptor over the full grid, matching the pipeline's
 * pooling: per channel (mean of max(v, eps)^p)^(1/p), then L2-normalized.
 * Pooling reads the float32-stored values in double precision so the
 * descriptor agrees with downstream re-pooling of the exported file.
 */
export function gemDescriptor(t: FeatureTensor, p = 3.0, eps = 1e-6): Float32Array {
  const cells = t.height * t.width
  const acc = new Float64Array(t.channels)
  for (let i = 0; i < cells; i++) {
    for (let c = 0; c < t.channels; c++) {
      const v = Math.max(t.values[i * t.channels + c], eps)
      acc[c] += Math.pow(v, p)
    }
  }
  const pooled = new Float64Array(t.channels)
  for (let c = 0; c < t.channels; c++) pooled[c] = Math.pow(acc[c] / cells, 1 / p)
  return l2Normalize(pooled)
}

/** plain average-pooled descriptor (alternative to the GeM path) */
export function meanDescriptor(t: FeatureTensor): Float32Array {
  const cells = t.height * t.width
  const acc = new Float64Array(t.channels)
  for (let i = 0; i < cells; i++) {
    for (let c = 0; c < t.channels; c++) acc[c] += t.values[i * t.channels + c]
  }
  for (let c = 0; c < t.channels; c++) acc[c] /= cells
  return l2Normalize(acc)
}

function l2Normalize(v: Float64Array): Float32Array {
  let norm = 0
  for (let i = 0; i < v.length; i++) norm += v[i] * v[i]
  norm = Math.sqrt(norm)
  if (norm === 0) throw new Error('cannot normalize a zero descriptor')
  const out = new Float32Array(v.length)
  for (let i = 0; i < v.length; i++) out[i] = v[i] / norm
  return out
}
