import { readFileSync } from 'fs'
import { PNG } from 'pngjs'

export interface RgbImage {
  width: number
  height: number
  /** row-major RGB triples scaled to [0, 1] */
  data: Float64Array
}

export function readPng(path: string): RgbImage {
  const png = PNG.sync.read(readFileSync(path))
  const { width, height } = png
  const data = new Float64Array(width * height * 3)
  for (let i = 0; i < width * height; i++) {
    data[i * 3] = png.data[i * 4] / 255
    data[i * 3 + 1] = png.data[i * 4 + 1] / 255
    data[i * 3 + 2] = png.data[i * 4 + 2] / 255
  }
  return { width, height, data }
}

export function luminance(img: RgbImage, x: number, y: number): number {
  const i = (y * img.width + x) * 3
  return 0.299 * img.data[i] + 0.587 * img.data[i + 1] + 0.114 * img.data[i + 2]
}
