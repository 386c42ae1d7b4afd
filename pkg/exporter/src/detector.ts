/**
 * Box detectors behind the same adapter idea as the backbone.  The built-in
 * detector proposes candidate boxes from patch-level saliency (local
 * contrast plus gradient energy): deliberately high recall and noisy, the
 * regime the downstream refinement consumes.  A real vehicle detector
 * (e.g. a tfjs YOLO-family model filtered to vehicle classes) can be
 * plugged in instead.
 */

import { Detection } from './format'
import { RgbImage, luminance } from './image'

export interface BoxDetector {
  name: string
  detect(image: RgbImage): Detection[]
}

const WINDOW_SIZES: [number, number][] = [
  [3, 3],
  [5, 4],
]
const MAX_DETECTIONS = 12
const MAX_OVERLAP = 0.3

function saliencyGrid(image: RgbImage, stride: number): { grid: Float64Array; gw: number; gh: number } {
  const gw = Math.floor(image.width / stride)
  const gh = Math.floor(image.height / stride)
  const grid = new Float64Array(gw * gh)
  for (let gy = 0; gy < gh; gy++) {
    for (let gx = 0; gx < gw; gx++) {
      let sum = 0
      let sum2 = 0
      let grad = 0
      let n = 0
      for (let y = gy * stride; y < (gy + 1) * stride; y++) {
        for (let x = gx * stride; x < (gx + 1) * stride; x++) {
          const l = luminance(image, x, y)
          sum += l
          sum2 += l * l
          if (x + 1 < image.width) grad += Math.abs(luminance(image, x + 1, y) - l)
          n++
        }
      }
      const mean = sum / n
      grid[gy * gw + gx] = Math.sqrt(Math.max(sum2 / n - mean * mean, 0)) + grad / n
    }
  }
  return { grid, gw, gh }
}

function overlapFraction(a: [number, number, number, number], b: [number, number, number, number]): number {
  const ix = Math.max(0, Math.min(a[2], b[2]) - Math.max(a[0], b[0]))
  const iy = Math.max(0, Math.min(a[3], b[3]) - Math.max(a[1], b[1]))
  const inter = ix * iy
  const areaA = (a[2] - a[0]) * (a[3] - a[1])
  const areaB = (b[2] - b[0]) * (b[3] - b[1])
  return inter / Math.min(areaA, areaB)
}

export function builtinDetector(scoreFloor = 0.1, stride = 8): BoxDetector {
  return {
    name: `builtin-saliency-s${stride}`,
    detect(image: RgbImage): Detection[] {
      const { grid, gw, gh } = saliencyGrid(image, stride)
      const proposals: Detection[] = []
      let maxScore = 0
      for (const [ww, wh] of WINDOW_SIZES) {
        if (gw < ww || gh < wh) continue
        for (let gy = 0; gy + wh <= gh; gy++) {
          for (let gx = 0; gx + ww <= gw; gx++) {
            let s = 0
            for (let y = gy; y < gy + wh; y++) {
              for (let x = gx; x < gx + ww; x++) s += grid[y * gw + x]
            }
            s /= ww * wh
            if (s > maxScore) maxScore = s
            proposals.push({
              box: [gx * stride, gy * stride, (gx + ww) * stride, (gy + wh) * stride],
              score: s,
            })
          }
        }
      }
      if (maxScore === 0) return []
      // normalize onto (0, 1], rank, then greedy non-overlap selection
      proposals.forEach(p => (p.score = p.score / maxScore))
      proposals.sort((a, b) => b.score - a.score || a.box[0] - b.box[0] || a.box[1] - b.box[1])
      const kept: Detection[] = []
      for (const p of proposals) {
        if (p.score < scoreFloor) break
        if (kept.some(k => overlapFraction(k.box, p.box) > MAX_OVERLAP)) continue
        kept.push(p)
        if (kept.length >= MAX_DETECTIONS) break
      }
      return kept
    },
  }
}
