import { describe, expect, it } from 'vitest'

import { builtinBackbone, gemDescriptor, meanDescriptor } from '../src/backbone'
import { builtinDetector } from '../src/detector'
import { RgbImage } from '../src/image'

function syntheticImage(width: number, height: number, seed = 1): RgbImage {
  const data = new Float64Array(width * height * 3)
  let state = seed
  for (let i = 0; i < data.length; i++) {
    state = (state * 1103515245 + 12345) & 0x7fffffff
    data[i] = (state % 1000) / 1000
  }
  return { width, height, data }
}

describe('builtin backbone', () => {
  it('produces the declared grid and non-negative activations', () => {
    const backbone = builtinBackbone(16, 8)
    const t = backbone.extract(syntheticImage(128, 96))
    expect(t.width).toBe(16)
    expect(t.height).toBe(12)
    expect(t.channels).toBe(16)
    expect(t.sourceWidth).toBe(128)
    expect(Math.min(...Array.from(t.values))).toBeGreaterThanOrEqual(0)
  })

  it('is deterministic: identical images give identical features', () => {
    const backbone = builtinBackbone()
    const a = backbone.extract(syntheticImage(64, 64, 7))
    const b = backbone.extract(syntheticImage(64, 64, 7))
    expect(Array.from(a.values)).toEqual(Array.from(b.values))
  })

  it('responds to image content', () => {
    const backbone = builtinBackbone()
    const a = backbone.extract(syntheticImage(64, 64, 1))
    const b = backbone.extract(syntheticImage(64, 64, 2))
    expect(Array.from(a.values)).not.toEqual(Array.from(b.values))
  })
})

describe('descriptors', () => {
  it('gem descriptor matches a direct evaluation of the pooling formula', () => {
    const backbone = builtinBackbone(8, 8)
    const t = backbone.extract(syntheticImage(64, 48))
    const desc = gemDescriptor(t, 3.0, 1e-6)

    const cells = t.height * t.width
    const pooled = new Array(t.channels).fill(0)
    for (let i = 0; i < cells; i++) {
      for (let c = 0; c < t.channels; c++) {
        pooled[c] += Math.pow(Math.max(t.values[i * t.channels + c], 1e-6), 3)
      }
    }
    let norm = 0
    for (let c = 0; c < t.channels; c++) {
      pooled[c] = Math.pow(pooled[c] / cells, 1 / 3)
      norm += pooled[c] * pooled[c]
    }
    norm = Math.sqrt(norm)
    for (let c = 0; c < t.channels; c++) {
      expect(Math.abs(desc[c] - pooled[c] / norm)).toBeLessThan(1e-6)
    }
  })

  it('descriptors are unit norm', () => {
    const t = builtinBackbone().extract(syntheticImage(64, 64))
    for (const desc of [gemDescriptor(t), meanDescriptor(t)]) {
      let norm = 0
      for (const v of desc) norm += v * v
      expect(Math.abs(Math.sqrt(norm) - 1)).toBeLessThan(1e-6)
    }
  })
})

describe('builtin detector', () => {
  it('respects the score floor and image bounds', () => {
    const detector = builtinDetector(0.1, 8)
    const dets = detector.detect(syntheticImage(128, 96, 3))
    expect(dets.length).toBeGreaterThan(0)
    for (const d of dets) {
      expect(d.score).toBeGreaterThanOrEqual(0.1)
      expect(d.score).toBeLessThanOrEqual(1.0)
      expect(d.box[0]).toBeGreaterThanOrEqual(0)
      expect(d.box[1]).toBeGreaterThanOrEqual(0)
      expect(d.box[2]).toBeLessThanOrEqual(128)
      expect(d.box[3]).toBeLessThanOrEqual(96)
      expect(d.box[0]).toBeLessThan(d.box[2])
      expect(d.box[1]).toBeLessThan(d.box[3])
    }
  })

  it('is deterministic', () => {
    const detector = builtinDetector()
    const a = detector.detect(syntheticImage(96, 96, 5))
    const b = detector.detect(syntheticImage(96, 96, 5))
    expect(a).toEqual(b)
  })
})
