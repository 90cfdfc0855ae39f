/**
 * The gateway frame grammar, client side.
 *
 * One JSON object per WebSocket text frame, discriminated by "op".
 * Everything the gateway sends is validated here before the state
 * machine sees it; everything we send is encoded canonically (sorted
 * keys, no insignificant whitespace) so frames are byte-stable.
 */

export const MAX_PEER_NAME = 256;
export const MAX_BLOB = 64 * 1024;

export const SIGNAL_KINDS = ["offer", "answer", "candidate", "bye"] as const;
export type SignalKind = (typeof SIGNAL_KINDS)[number];

export const ERROR_CODES = [
  "PEER_NOT_FOUND",
  "RELAY_FAILED",
  "REGISTER_FAILED",
  "BAD_REQUEST",
] as const;
export type ErrorCode = (typeof ERROR_CODES)[number];

export type ClientFrame =
  | { op: "register"; name: string }
  | { op: "connect"; to: string }
  | { op: "signal"; session: string; kind: SignalKind; seq: number; blob: string }
  | { op: "leave" };

export type ServerFrame =
  | { op: "registered"; replicas: number }
  | { op: "session"; session: string; from: string }
  | { op: "signal"; session: string; kind: SignalKind; seq: number; blob: string }
  | { op: "error"; code: ErrorCode; detail: string };

const HEX = /^[0-9a-f]+$/;

function isRecord(value: unknown): value is Record<string, unknown> {
  return typeof value === "object" && value !== null && !Array.isArray(value);
}

function isName(value: unknown): value is string {
  return typeof value === "string" && value.length >= 1 && value.length <= MAX_PEER_NAME;
}

function isSessionId(value: unknown): value is string {
  return typeof value === "string" && value.length > 0 && HEX.test(value);
}

function isSeq(value: unknown): value is number {
  return typeof value === "number" && Number.isSafeInteger(value) && value >= 1;
}

function isBlob(value: unknown): value is string {
  return typeof value === "string" && value.length <= MAX_BLOB;
}

function hasExactKeys(obj: Record<string, unknown>, keys: string[]): boolean {
  return Object.keys(obj).length === keys.length && keys.every((k) => k in obj);
}

/** Parse and validate one frame from the gateway; null for anything off-grammar. */
export function parseServerFrame(raw: unknown): ServerFrame | null {
  if (typeof raw !== "string") return null;
  let data: unknown;
  try {
    data = JSON.parse(raw);
  } catch {
    return null;
  }
  if (!isRecord(data)) return null;
  switch (data.op) {
    case "registered":
      if (!hasExactKeys(data, ["op", "replicas"])) return null;
      if (!isSeq(data.replicas)) return null;
      return { op: "registered", replicas: data.replicas };
    case "session":
      if (!hasExactKeys(data, ["op", "session", "from"])) return null;
      if (!isSessionId(data.session) || !isName(data.from)) return null;
      return { op: "session", session: data.session, from: data.from };
    case "signal":
      if (!hasExactKeys(data, ["op", "session", "kind", "seq", "blob"])) return null;
      if (!isSessionId(data.session)) return null;
      if (!SIGNAL_KINDS.includes(data.kind as SignalKind)) return null;
      if (!isSeq(data.seq) || !isBlob(data.blob)) return null;
      return {
        op: "signal",
        session: data.session,
        kind: data.kind as SignalKind,
        seq: data.seq,
        blob: data.blob,
      };
    case "error":
      if (!hasExactKeys(data, ["op", "code", "detail"])) return null;
      if (!ERROR_CODES.includes(data.code as ErrorCode)) return null;
      if (typeof data.detail !== "string") return null;
      return { op: "error", code: data.code as ErrorCode, detail: data.detail };
    default:
      return null;
  }
}

/** Canonical JSON: keys sorted, compact separators. */
export function encodeClientFrame(frame: ClientFrame): string {
  const obj = frame as unknown as Record<string, unknown>;
  return JSON.stringify(obj, Object.keys(obj).sort());
}
