/**
 * Writers and readers for the mapsieve interchange formats.
 *
 * The binary tensor container is little-endian: 4-byte magic "MSFT", one
 * version byte, then height/width/channels/source-width/source-height as
 * uint32, then row-major channel-last float32 values.  Descriptors reuse
 * the container with height = width = 1.
 */

import { mkdirSync, writeFileSync } from 'fs'
import { dirname } from 'path'

export const FEATURE_MAGIC = 'MSFT'
export const FORMAT_VERSION = 1

export interface FeatureTensor {
  height: number
  width: number
  channels: number
  sourceWidth: number
  sourceHeight: number
  /** row-major, channel-last */
  values: Float32Array
}

export interface Detection {
  box: [number, number, number, number]
  score: number
}

export function encodeFeatureTensor(t: FeatureTensor): Buffer {
  const expected = t.height * t.width * t.channels
  if (t.values.length !== expected) {
    throw new Error(`tensor payload has ${t.values.length} values, expected ${expected}`)
  }
  const header = Buffer.alloc(4 + 1 + 5 * 4)
  header.write(FEATURE_MAGIC, 0, 'ascii')
  header.writeUInt8(FORMAT_VERSION, 4)
  header.writeUInt32LE(t.height, 5)
  header.writeUInt32LE(t.width, 9)
  header.writeUInt32LE(t.channels, 13)
  header.writeUInt32LE(t.sourceWidth, 17)
  header.writeUInt32LE(t.sourceHeight, 21)
  const payload = Buffer.from(t.values.buffer.slice(t.values.byteOffset, t.values.byteOffset + t.values.byteLength))
  return Buffer.concat([header, payload])
}

export function decodeFeatureTensor(buf: Buffer): FeatureTensor {
  if (buf.length < 25) throw new Error('tensor file shorter than its header')
  if (buf.toString('ascii', 0, 4) !== FEATURE_MAGIC) throw new Error('bad magic')
  if (buf.readUInt8(4) !== FORMAT_VERSION) throw new Error('unsupported version')
  const height = buf.readUInt32LE(5)
  const width = buf.readUInt32LE(9)
  const channels = buf.readUInt32LE(13)
  const sourceWidth = buf.readUInt32LE(17)
  const sourceHeight = buf.readUInt32LE(21)
  const count = height * width * channels
  if (buf.length - 25 !== count * 4) throw new Error('truncated payload')
  const values = new Float32Array(count)
  for (let i = 0; i < count; i++) values[i] = buf.readFloatLE(25 + i * 4)
  return { height, width, channels, sourceWidth, sourceHeight, values }
}

function writeFileEnsuringDir(path: string, data: Buffer | string): void {
  mkdirSync(dirname(path), { recursive: true })
  writeFileSync(path, data)
}

export function writeFeatureTensor(path: string, t: FeatureTensor): void {
  writeFileEnsuringDir(path, encodeFeatureTensor(t))
}

export function writeDescriptor(
  path: string,
  values: Float32Array,
  sourceWidth: number,
  sourceHeight: number,
): void {
  writeFeatureTensor(path, {
    height: 1,
    width: 1,
    channels: values.length,
    sourceWidth,
    sourceHeight,
    values,
  })
}

function writeJson(path: string, data: unknown): void {
  writeFileEnsuringDir(path, JSON.stringify(data, null, 2) + '\n')
}

export function writeDetectionsFile(path: string, frames: Record<string, Detection[]>): void {
  const out: Record<string, { box: number[]; detector_score: number }[]> = {}
  for (const frameId of Object.keys(frames).sort()) {
    out[frameId] = frames[frameId].map(d => ({ box: [...d.box], detector_score: d.score }))
  }
  writeJson(path, { format: 'mapsieve-detections', version: 1, frames: out })
}

export function writeAnnotationsStub(path: string, frameIds: string[]): void {
  const frames: Record<string, unknown[]> = {}
  for (const id of [...frameIds].sort()) frames[id] = []
  writeJson(path, { format: 'mapsieve-annotations', version: 1, frames })
}

export interface ManifestFrame {
  frameId: string
  featurePath: string
  descriptorPath: string
}

/**
 * Self-paired manifest: every exported image serves as both a reference map
 * frame and a query frame (pinned to itself) until the caller reorganizes
 * the traverses.  Paths are stored relative to the manifest location.
 */
export function writeManifest(
  path: string,
  imageDims: [number, number],
  frames: ManifestFrame[],
  detectionsPath: string,
  annotationsPath: string,
  metadata: Record<string, string>,
): void {
  const ordered = [...frames].sort((a, b) => (a.frameId < b.frameId ? -1 : 1))
  writeJson(path, {
    format: 'mapsieve-manifest',
    version: 1,
    image_dims: imageDims,
    metadata,
    reference_frames: ordered.map(f => ({
      frame_id: `ref_${f.frameId}`,
      feature_path: f.featurePath,
      descriptor_path: f.descriptorPath,
      submap_id: 'sm_000',
    })),
    query_frames: ordered.map(f => ({
      frame_id: f.frameId,
      feature_path: f.featurePath,
      descriptor_path: f.descriptorPath,
      submap_id: 'sm_000',
      detections_path: detectionsPath,
      annotations_path: annotationsPath,
      pinned_reference_id: `ref_${f.frameId}`,
    })),
  })
}
