import { mkdtempSync, readFileSync, writeFileSync } from 'fs'
import { tmpdir } from 'os'
import { join } from 'path'
import { PNG } from 'pngjs'
import { beforeAll, describe, expect, it } from 'vitest'

import { main } from '../src/cli'
import { decodeFeatureTensor } from '../src/format'

function writeTestPng(path: string, width: number, height: number, seed: number): void {
  const png = new PNG({ width, height })
  let state = seed
  for (let i = 0; i < width * height; i++) {
    state = (state * 1103515245 + 12345) & 0x7fffffff
    png.data[i * 4] = state % 256
    png.data[i * 4 + 1] = (state >> 8) % 256
    png.data[i * 4 + 2] = (state >> 16) % 256
    png.data[i * 4 + 3] = 255
  }
  writeFileSync(path, PNG.sync.write(png))
}

describe('exporter CLI', () => {
  let images: string
  let out: string

  beforeAll(() => {
    const root = mkdtempSync(join(tmpdir(), 'exporter-test-'))
    images = join(root, 'images')
    out = join(root, 'out')
    require('fs').mkdirSync(images)
    for (let i = 0; i < 4; i++) {
      writeTestPng(join(images, `frame_${i}.png`), 128, 96, 100 + i)
    }
  })

  it('exports features then detections with a validating manifest layout', () => {
    expect(main(['export', 'features', '--images', images, '--out', out, '--descriptor', 'gem'])).toBe(0)
    const manifestPath = join(out, 'manifest.json')
    expect(
      main(['export', 'detections', '--images', images, '--out', out, '--manifest-out', manifestPath]),
    ).toBe(0)

    const manifest = JSON.parse(readFileSync(manifestPath, 'utf-8'))
    expect(manifest.image_dims).toEqual([128, 96])
    expect(manifest.reference_frames).toHaveLength(4)
    expect(manifest.query_frames).toHaveLength(4)
    for (const q of manifest.query_frames) {
      expect(q.pinned_reference_id).toBe(`ref_${q.frame_id}`)
    }

    const tensor = decodeFeatureTensor(readFileSync(join(out, 'features', 'frame_0.fmap')))
    expect(tensor.width).toBe(16)
    expect(tensor.height).toBe(12)
    expect(tensor.sourceWidth).toBe(128)

    const dets = JSON.parse(readFileSync(join(out, 'detections.json'), 'utf-8'))
    const all = Object.values(dets.frames).flat() as { detector_score: number }[]
    expect(all.length).toBeGreaterThan(0)
    for (const d of all) expect(d.detector_score).toBeGreaterThanOrEqual(0.1)

    const anns = JSON.parse(readFileSync(join(out, 'annotations.json'), 'utf-8'))
    expect(Object.keys(anns.frames)).toHaveLength(4)
  })

  it('exports are byte-deterministic', () => {
    const root = mkdtempSync(join(tmpdir(), 'exporter-det-'))
    const outA = join(root, 'a')
    const outB = join(root, 'b')
    for (const dir of [outA, outB]) {
      expect(main(['export', 'features', '--images', images, '--out', dir])).toBe(0)
      expect(main(['export', 'detections', '--images', images, '--out', dir])).toBe(0)
    }
    for (const rel of ['features/frame_0.fmap', 'descriptors/frame_2.desc', 'detections.json']) {
      expect(readFileSync(join(outA, rel)).equals(readFileSync(join(outB, rel)))).toBe(true)
    }
  })

  it('refuses a manifest before both exports exist', () => {
    const root = mkdtempSync(join(tmpdir(), 'exporter-test2-'))
    const out2 = join(root, 'out')
    expect(
      main([
        'export', 'features',
        '--images', images,
        '--out', out2,
        '--manifest-out', join(out2, 'manifest.json'),
      ]),
    ).toBe(1)
  })

  it('rejects unknown flags and missing dirs', () => {
    expect(main(['export', 'features', '--images', images, '--out', out, '--bogus', '1'])).toBe(1)
    expect(main(['export', 'features', '--images', '/nonexistent', '--out', out])).toBe(1)
    expect(main(['transmogrify'])).toBe(1)
  })
})
