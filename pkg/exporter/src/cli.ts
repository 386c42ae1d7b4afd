#!/usr/bin/env node
/**
 * mapsieve exporter CLI.
 *
 *   node dist/cli.js export features   --images DIR --out DIR [--descriptor gem|mean]
 *                                      [--channels 16] [--stride 8] [--manifest-out PATH]
 *   node dist/cli.js export detections --images DIR --out DIR [--score-floor 0.1]
 *                                      [--manifest-out PATH]
 *
 * --manifest-out writes a self-paired traverse manifest once both features
 * and detections exist in the output directory.
 */

import { existsSync, readdirSync } from 'fs'
import { basename, join, relative } from 'path'

import { builtinBackbone, gemDescriptor, meanDescriptor } from './backbone'
import { builtinDetector } from './detector'
import {
  Detection,
  writeAnnotationsStub,
  writeDescriptor,
  writeDetectionsFile,
  writeFeatureTensor,
  writeManifest,
} from './format'
import { readPng, RgbImage } from './image'

interface Args {
  command: string
  images: string
  out: string
  descriptor: string
  channels: number
  stride: number
  scoreFloor: number
  manifestOut?: string
}

function parseArgs(argv: string[]): Args {
  if (argv[0] !== 'export' || !['features', 'detections'].includes(argv[1] ?? '')) {
    throw new Error('usage: export features|detections --images DIR --out DIR [options]')
  }
  const args: Args = {
    command: argv[1],
    images: '',
    out: '',
    descriptor: 'gem',
    channels: 16,
    stride: 8,
    scoreFloor: 0.1,
  }
  for (let i = 2; i < argv.length; i += 2) {
    const key = argv[i]
    const value = argv[i + 1]
    if (value === undefined) throw new Error(`missing value for ${key}`)
    switch (key) {
      case '--images':
        args.images = value
        break
      case '--out':
        args.out = value
        break
      case '--descriptor':
        if (!['gem', 'mean'].includes(value)) throw new Error(`unknown descriptor path ${value}`)
        args.descriptor = value
        break
      case '--channels':
        args.channels = parseInt(value, 10)
        break
      case '--stride':
        args.stride = parseInt(value, 10)
        break
      case '--score-floor':
        args.scoreFloor = parseFloat(value)
        break
      case '--manifest-out':
        args.manifestOut = value
        break
      default:
        throw new Error(`unknown flag ${key}`)
    }
  }
  if (!args.images || !args.out) throw new Error('--images and --out are required')
  return args
}

function listFrames(imagesDir: string): { frameId: string; path: string }[] {
  const frames = readdirSync(imagesDir)
    .filter(name => name.toLowerCase().endsWith('.png'))
    .sort()
    .map(name => ({ frameId: basename(name, '.png'), path: join(imagesDir, name) }))
  if (frames.length === 0) throw new Error(`no .png images found in ${imagesDir}`)
  const seen = new Set<string>()
  for (const f of frames) {
    if (seen.has(f.frameId)) throw new Error(`duplicate frame id ${f.frameId}`)
    seen.add(f.frameId)
  }
  return frames
}

function requireUniformDims(images: RgbImage[]): [number, number] {
  const dims: [number, number] = [images[0].width, images[0].height]
  for (const img of images) {
    if (img.width !== dims[0] || img.height !== dims[1]) {
      throw new Error('all images in one traverse must share the same dimensions')
    }
  }
  return dims
}

function exportFeatures(args: Args): void {
  const frames = listFrames(args.images)
  const images = frames.map(f => readPng(f.path))
  requireUniformDims(images)
  const backbone = builtinBackbone(args.channels, args.stride)
  for (let i = 0; i < frames.length; i++) {
    const tensor = backbone.extract(images[i])
    const descriptor = args.descriptor === 'gem' ? gemDescriptor(tensor) : meanDescriptor(tensor)
    writeFeatureTensor(join(args.out, 'features', `${frames[i].frameId}.fmap`), tensor)
    writeDescriptor(
      join(args.out, 'descriptors', `${frames[i].frameId}.desc`),
      descriptor,
      images[i].width,
      images[i].height,
    )
  }
  console.log(`exported ${frames.length} feature maps + descriptors (${backbone.name}, ${args.descriptor})`)
}

function exportDetections(args: Args): void {
  const frames = listFrames(args.images)
  const images = frames.map(f => readPng(f.path))
  requireUniformDims(images)
  const detector = builtinDetector(args.scoreFloor, args.stride)
  const byFrame: Record<string, Detection[]> = {}
  let total = 0
  for (let i = 0; i < frames.length; i++) {
    byFrame[frames[i].frameId] = detector.detect(images[i])
    total += byFrame[frames[i].frameId].length
  }
  writeDetectionsFile(join(args.out, 'detections.json'), byFrame)
  console.log(`exported ${total} detections over ${frames.length} frames (${detector.name})`)
}

function maybeWriteManifest(args: Args): void {
  if (!args.manifestOut) return
  const frames = listFrames(args.images)
  const images = frames.map(f => readPng(f.path))
  const dims = requireUniformDims(images)
  const missing: string[] = []
  for (const f of frames) {
    if (!existsSync(join(args.out, 'features', `${f.frameId}.fmap`))) missing.push('features')
    if (!existsSync(join(args.out, 'descriptors', `${f.frameId}.desc`))) missing.push('descriptors')
  }
  if (!existsSync(join(args.out, 'detections.json'))) missing.push('detections')
  if (missing.length) {
    throw new Error(
      `cannot write manifest, missing exports: ${[...new Set(missing)].join(', ')} ` +
        '(run export features and export detections into the same --out first)',
    )
  }
  writeAnnotationsStub(join(args.out, 'annotations.json'), frames.map(f => f.frameId))
  const manifestDir = join(args.manifestOut, '..')
  writeManifest(
    args.manifestOut,
    dims,
    frames.map(f => ({
      frameId: f.frameId,
      featurePath: relative(manifestDir, join(args.out, 'features', `${f.frameId}.fmap`)),
      descriptorPath: relative(manifestDir, join(args.out, 'descriptors', `${f.frameId}.desc`)),
    })),
    relative(manifestDir, join(args.out, 'detections.json')),
    relative(manifestDir, join(args.out, 'annotations.json')),
    { condition: 'exported', source: basename(args.images) },
  )
  console.log(`manifest: ${args.manifestOut}`)
}

export function main(argv: string[]): number {
  try {
    const args = parseArgs(argv)
    if (args.command === 'features') exportFeatures(args)
    else exportDetections(args)
    maybeWriteManifest(args)
    return 0
  } catch (err) {
    console.error(`error: ${err instanceof Error ? err.message : err}`)
    return 1
  }
}

if (require.main === module) {
  process.exit(main(process.argv.slice(2)))
}
