// Binary bridge protocol: little-endian, length-prefixed, versioned.
//
// Envelope: u32 payloadLength | u16 magic "MD" | u8 version | u8 kind |
//           u32 stepIndex | body
//
// Bodies:
//   takeover_input: u8 active | f32 steer | f32 throttle | f64 clientTsMs
//   control:        u8 code (0 start, 1 pause, 2 stop)
//   ack:            u8 ackedKind
//   metrics_update: u32 jsonLength | utf-8 json
//   state_frame:    u8 source | u8 intervened | 6*f32 ego(x,y,heading,v,len,w)
//                   | u16 nRoadPts | u8 laneCount | f32 laneWidth
//                   | nRoadPts*(f32 x, f32 y)
//                   | u16 nVehicles | per vehicle u32 uid + 6*f32
//                   | u16 nObstacles | per obstacle u32 uid + 5*f32(x,y,heading,len,w)
//                   | 4*f32 checkpoints (x0,y0,x1,y1)

export const PROTOCOL_VERSION = 1;
export const MAGIC = 0x444d;

export const KIND_STATE_FRAME = 1;
export const KIND_TAKEOVER_INPUT = 2;
export const KIND_CONTROL = 3;
export const KIND_METRICS_UPDATE = 4;
export const KIND_ACK = 5;

export const CONTROL_START = 0;
export const CONTROL_PAUSE = 1;
export const CONTROL_STOP = 2;

export const SOURCE_LABELS = ['av', 'human', 'physics'] as const;

export interface VehiclePose {
  uid: number;
  x: number;
  y: number;
  heading: number;
  v: number;
  length: number;
  width: number;
}

export interface ObstaclePose {
  uid: number;
  x: number;
  y: number;
  heading: number;
  length: number;
  width: number;
}

export interface SceneFrame {
  kind: 'state_frame';
  stepIndex: number;
  source: number;
  intervened: boolean;
  ego: Omit<VehiclePose, 'uid'>;
  road: { laneCount: number; laneWidth: number; points: Float32Array };
  vehicles: VehiclePose[];
  obstacles: ObstaclePose[];
  checkpoints: [number, number, number, number];
}

export interface AckMessage {
  kind: 'ack';
  stepIndex: number;
  ackedKind: number;
}

export interface MetricsMessage {
  kind: 'metrics_update';
  stepIndex: number;
  metrics: Record<string, unknown>;
}

export type BridgeMessage = SceneFrame | AckMessage | MetricsMessage;

export class ProtocolError extends Error {}

export function encodeTakeoverInput(
  stepIndex: number,
  active: boolean,
  steer: number,
  throttle: number,
  clientTsMs: number,
): ArrayBuffer {
  const payload = 8 + 1 + 4 + 4 + 8;
  const buf = new ArrayBuffer(4 + payload);
  const view = new DataView(buf);
  view.setUint32(0, payload, true);
  view.setUint16(4, MAGIC, true);
  view.setUint8(6, PROTOCOL_VERSION);
  view.setUint8(7, KIND_TAKEOVER_INPUT);
  view.setUint32(8, stepIndex, true);
  view.setUint8(12, active ? 1 : 0);
  view.setFloat32(13, steer, true);
  view.setFloat32(17, throttle, true);
  view.setFloat64(21, clientTsMs, true);
  return buf;
}

export function encodeControl(stepIndex: number, code: number): ArrayBuffer {
  const payload = 8 + 1;
  const buf = new ArrayBuffer(4 + payload);
  const view = new DataView(buf);
  view.setUint32(0, payload, true);
  view.setUint16(4, MAGIC, true);
  view.setUint8(6, PROTOCOL_VERSION);
  view.setUint8(7, KIND_CONTROL);
  view.setUint32(8, stepIndex, true);
  view.setUint8(12, code);
  return buf;
}

class Reader {
  private off = 12;

  constructor(private view: DataView) {}

  u8(): number {
    return this.view.getUint8(this.off++);
  }

  u16(): number {
    const v = this.view.getUint16(this.off, true);
    this.off += 2;
    return v;
  }

  u32(): number {
    const v = this.view.getUint32(this.off, true);
    this.off += 4;
    return v;
  }

  f32(): number {
    const v = this.view.getFloat32(this.off, true);
    this.off += 4;
    return v;
  }

  bytes(n: number): Uint8Array {
    const v = new Uint8Array(this.view.buffer, this.view.byteOffset + this.off, n);
    this.off += n;
    return v;
  }
}

export function decodeMessage(buf: ArrayBuffer): BridgeMessage {
  if (buf.byteLength < 12) {
    throw new ProtocolError(`frame too short (${buf.byteLength} bytes)`);
  }
  const view = new DataView(buf);
  const length = view.getUint32(0, true);
  if (length !== buf.byteLength - 4) {
    throw new ProtocolError(`length prefix ${length} != payload ${buf.byteLength - 4}`);
  }
  if (view.getUint16(4, true) !== MAGIC) {
    throw new ProtocolError('bad magic');
  }
  if (view.getUint8(6) !== PROTOCOL_VERSION) {
    throw new ProtocolError(`unsupported protocol version ${view.getUint8(6)}`);
  }
  const kind = view.getUint8(7);
  const stepIndex = view.getUint32(8, true);
  const r = new Reader(view);

  if (kind === KIND_ACK) {
    return { kind: 'ack', stepIndex, ackedKind: r.u8() };
  }
  if (kind === KIND_METRICS_UPDATE) {
    const n = r.u32();
    const json = new TextDecoder().decode(r.bytes(n));
    return { kind: 'metrics_update', stepIndex, metrics: JSON.parse(json) };
  }
  if (kind === KIND_STATE_FRAME) {
    const source = r.u8();
    const intervened = r.u8() !== 0;
    const ego = {
      x: r.f32(),
      y: r.f32(),
      heading: r.f32(),
      v: r.f32(),
      length: r.f32(),
      width: r.f32(),
    };
    const nPts = r.u16();
    const laneCount = r.u8();
    const laneWidth = r.f32();
    const points = new Float32Array(2 * nPts);
    for (let i = 0; i < 2 * nPts; i++) {
      points[i] = r.f32();
    }
    const vehicles: VehiclePose[] = [];
    const nVeh = r.u16();
    for (let i = 0; i < nVeh; i++) {
      vehicles.push({
        uid: r.u32(),
        x: r.f32(),
        y: r.f32(),
        heading: r.f32(),
        v: r.f32(),
        length: r.f32(),
        width: r.f32(),
      });
    }
    const obstacles: ObstaclePose[] = [];
    const nObs = r.u16();
    for (let i = 0; i < nObs; i++) {
      obstacles.push({
        uid: r.u32(),
        x: r.f32(),
        y: r.f32(),
        heading: r.f32(),
        length: r.f32(),
        width: r.f32(),
      });
    }
    const checkpoints: [number, number, number, number] = [r.f32(), r.f32(), r.f32(), r.f32()];
    return {
      kind: 'state_frame',
      stepIndex,
      source,
      intervened,
      ego,
      road: { laneCount, laneWidth, points },
      vehicles,
      obstacles,
      checkpoints,
    };
  }
  throw new ProtocolError(`unknown message kind ${kind}`);
}
