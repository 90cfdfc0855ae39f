/**
 * The call state machine.
 *
 * One client owns one WebSocket to its gateway and at most one active
 * call. Signaling blobs (session descriptions, ICE candidates) pass
 * through as opaque strings: we JSON-wrap and unwrap them for the wire
 * but never look inside the SDP. Once the data channel opens, chat
 * bytes travel peer to peer and the gateway sees no further signal
 * frames.
 *
 * The socket and peer-connection constructors are injected so the
 * whole machine runs under test against fakes.
 */

import {
  ClientFrame,
  MAX_PEER_NAME,
  ServerFrame,
  SignalKind,
  encodeClientFrame,
  parseServerFrame,
} from "./protocol.js";

export type ClientState = "disconnected" | "registered" | "calling" | "in-call";

export interface SocketLike {
  send(data: string): void;
  close(): void;
  onopen: (() => void) | null;
  onmessage: ((ev: { data: unknown }) => void) | null;
  onclose: (() => void) | null;
  onerror: (() => void) | null;
}

export interface ChannelLike {
  send(data: string): void;
  close(): void;
  onopen: (() => void) | null;
  onmessage: ((ev: { data: unknown }) => void) | null;
  onclose: (() => void) | null;
}

export interface SessionDescriptionLike {
  type?: string;
  sdp?: string;
}

export interface PeerConnectionLike {
  createDataChannel(label: string): ChannelLike;
  createOffer(): Promise<SessionDescriptionLike>;
  createAnswer(): Promise<SessionDescriptionLike>;
  setLocalDescription(desc: SessionDescriptionLike): Promise<void>;
  setRemoteDescription(desc: SessionDescriptionLike): Promise<void>;
  addIceCandidate(candidate: object): Promise<void>;
  close(): void;
  onicecandidate: ((ev: { candidate: { toJSON(): unknown } | null }) => void) | null;
  ondatachannel: ((ev: { channel: ChannelLike }) => void) | null;
}

export interface ClientDeps {
  makeSocket(url: string): SocketLike;
  makePeerConnection(): PeerConnectionLike;
}

export interface ClientCallbacks {
  onState(state: ClientState): void;
  onChat(from: string, text: string): void;
  onError(message: string): void;
}

export const DEFAULT_CALL_TIMEOUT_MS = 15_000;

export class CallClient {
  state: ClientState = "disconnected";
  myName = "";
  remoteName: string | null = null;

  private socket: SocketLike | null = null;
  private registered = false;
  private leaving = false;
  private pc: PeerConnectionLike | null = null;
  private channel: ChannelLike | null = null;
  private session: string | null = null;
  private seqOut = 0;
  private remoteDescriptionSet = false;
  private heldCandidates: string[] = [];
  private callTimer: ReturnType<typeof setTimeout> | null = null;

  constructor(
    private deps: ClientDeps,
    private cb: ClientCallbacks,
    private callTimeoutMs: number = DEFAULT_CALL_TIMEOUT_MS,
  ) {}

  /** Session id of the active call, null when idle. */
  get sessionId(): string | null {
    return this.session;
  }

  /** Open the gateway socket and claim a name. */
  register(name: string, gatewayUrl: string): void {
    if (this.state !== "disconnected") {
      this.cb.onError("already connected; leave first");
      return;
    }
    if (name.length < 1 || name.length > MAX_PEER_NAME) {
      this.cb.onError("pick a name between 1 and 256 characters");
      return;
    }
    if (!/^wss?:\/\//.test(gatewayUrl)) {
      this.cb.onError("gateway must be a ws:// or wss:// URL");
      return;
    }
    let socket: SocketLike;
    try {
      socket = this.deps.makeSocket(gatewayUrl);
    } catch {
      this.cb.onError(`could not open a socket to ${gatewayUrl}`);
      return;
    }
    this.socket = socket;
    this.myName = name;
    this.leaving = false;
    socket.onopen = () => this.sendFrame({ op: "register", name });
    socket.onmessage = (ev) => this.onRaw(ev.data);
    socket.onerror = () => this.onSocketGone();
    socket.onclose = () => this.onSocketGone();
  }

  /** Dial a remote peer by its registered name. */
  call(remote: string): void {
    if (this.state !== "registered") {
      this.cb.onError("register first, and finish any active call");
      return;
    }
    if (remote.length < 1 || remote.length > MAX_PEER_NAME || remote === this.myName) {
      this.cb.onError("enter someone else's name to call");
      return;
    }
    this.remoteName = remote;
    this.setState("calling");
    this.armCallTimer();
    this.sendFrame({ op: "connect", to: remote });
  }

  /** Send one chat line over the open data channel. */
  chat(text: string): void {
    if (this.state !== "in-call" || this.channel === null) {
      this.cb.onError("no call in progress");
      return;
    }
    this.channel.send(text);
  }

  /** End the active call but stay registered. */
  hangUp(): void {
    if (this.session !== null) {
      this.sendSignal("bye", "");
    }
    this.endCall(null);
  }

  /** Drop the name and close the gateway socket. */
  leave(): void {
    this.leaving = true;
    if (this.socket !== null && this.registered) {
      this.sendFrame({ op: "leave" });
    }
    this.socket?.close();
    this.resetAll();
  }

  // -- frame handling -------------------------------------------------

  private onRaw(data: unknown): void {
    const frame = parseServerFrame(data);
    if (frame === null) {
      this.cb.onError("gateway sent a frame outside the protocol; ignoring it");
      return;
    }
    switch (frame.op) {
      case "registered":
        this.registered = true;
        this.setState("registered");
        return;
      case "session":
        this.onSession(frame);
        return;
      case "signal":
        void this.onSignal(frame);
        return;
      case "error":
        this.onGatewayError(frame.code, frame.detail);
        return;
    }
  }

  private onSession(frame: ServerFrame & { op: "session" }): void {
    if (this.state === "calling" && this.session === null && frame.from === this.remoteName) {
      // our own dial came through; we are the offering side
      this.session = frame.session;
      void this.startAsCaller();
      return;
    }
    if (this.state === "registered") {
      // an incoming call; we answer when the offer lands
      this.session = frame.session;
      this.remoteName = frame.from;
      this.setState("calling");
      this.armCallTimer();
      this.preparePeerConnection();
      return;
    }
    if (frame.session !== this.session) {
      // busy: decline the second caller with a one-envelope bye
      this.sendFrame({ op: "signal", session: frame.session, kind: "bye", seq: 1, blob: "" });
    }
  }

  private async onSignal(frame: ServerFrame & { op: "signal" }): Promise<void> {
    if (frame.session !== this.session || this.pc === null) {
      return;
    }
    try {
      switch (frame.kind) {
        case "offer": {
          await this.pc.setRemoteDescription(this.parseDescription(frame.blob));
          this.remoteDescriptionSet = true;
          await this.drainHeldCandidates();
          const answer = await this.pc.createAnswer();
          await this.pc.setLocalDescription(answer);
          this.sendSignal("answer", JSON.stringify(answer));
          return;
        }
        case "answer":
          await this.pc.setRemoteDescription(this.parseDescription(frame.blob));
          this.remoteDescriptionSet = true;
          await this.drainHeldCandidates();
          return;
        case "candidate":
          if (!this.remoteDescriptionSet) {
            this.heldCandidates.push(frame.blob);
          } else {
            await this.pc.addIceCandidate(this.parseCandidate(frame.blob));
          }
          return;
        case "bye":
          this.endCall(`${this.remoteName ?? "peer"} ended the call`);
          return;
      }
    } catch (err) {
      this.endCall(`call setup failed: ${err instanceof Error ? err.message : String(err)}`);
    }
  }

  private onGatewayError(code: string, detail: string): void {
    if (code === "REGISTER_FAILED" && !this.registered) {
      this.cb.onError(`registration failed: ${detail}`);
      this.leaving = true;
      this.socket?.close();
      this.resetAll();
      return;
    }
    if (this.state === "calling" || this.state === "in-call") {
      this.endCall(`${code}: ${detail}`);
      return;
    }
    this.cb.onError(`${code}: ${detail}`);
  }

  // -- call setup -------------------------------------------------------

  private async startAsCaller(): Promise<void> {
    const pc = this.preparePeerConnection();
    const channel = pc.createDataChannel("chat");
    this.adoptChannel(channel);
    try {
      const offer = await pc.createOffer();
      await pc.setLocalDescription(offer);
      this.sendSignal("offer", JSON.stringify(offer));
    } catch (err) {
      this.endCall(`call setup failed: ${err instanceof Error ? err.message : String(err)}`);
    }
  }

  private preparePeerConnection(): PeerConnectionLike {
    const pc = this.deps.makePeerConnection();
    this.pc = pc;
    pc.onicecandidate = (ev) => {
      if (ev.candidate !== null && this.session !== null) {
        this.sendSignal("candidate", JSON.stringify(ev.candidate.toJSON()));
      }
    };
    pc.ondatachannel = (ev) => this.adoptChannel(ev.channel);
    return pc;
  }

  private adoptChannel(channel: ChannelLike): void {
    this.channel = channel;
    channel.onopen = () => {
      this.clearCallTimer();
      this.setState("in-call");
    };
    channel.onmessage = (ev) => {
      if (typeof ev.data === "string") {
        this.cb.onChat(this.remoteName ?? "peer", ev.data);
      }
    };
    channel.onclose = () => {
      if (this.state === "in-call") {
        this.endCall(`${this.remoteName ?? "peer"} left the call`);
      }
    };
  }

  private parseDescription(blob: string): SessionDescriptionLike {
    const parsed: unknown = JSON.parse(blob);
    if (typeof parsed !== "object" || parsed === null) {
      throw new Error("description blob is not an object");
    }
    return parsed as SessionDescriptionLike;
  }

  private parseCandidate(blob: string): object {
    const parsed: unknown = JSON.parse(blob);
    if (typeof parsed !== "object" || parsed === null) {
      throw new Error("candidate blob is not an object");
    }
    return parsed;
  }

  private async drainHeldCandidates(): Promise<void> {
    const held = this.heldCandidates;
    this.heldCandidates = [];
    for (const blob of held) {
      await this.pc?.addIceCandidate(this.parseCandidate(blob));
    }
  }

  // -- plumbing -----------------------------------------------------------

  private sendFrame(frame: ClientFrame): void {
    this.socket?.send(encodeClientFrame(frame));
  }

  private sendSignal(kind: SignalKind, blob: string): void {
    if (this.session === null) {
      return;
    }
    this.seqOut += 1;
    this.sendFrame({ op: "signal", session: this.session, kind, seq: this.seqOut, blob });
  }

  private armCallTimer(): void {
    this.clearCallTimer();
    this.callTimer = setTimeout(() => this.endCall("call timed out"), this.callTimeoutMs);
  }

  private clearCallTimer(): void {
    if (this.callTimer !== null) {
      clearTimeout(this.callTimer);
      this.callTimer = null;
    }
  }

  /** Tear down call state; null reason means a deliberate local hang-up. */
  private endCall(reason: string | null): void {
    this.clearCallTimer();
    this.closeCallObjects();
    this.session = null;
    this.remoteName = null;
    this.seqOut = 0;
    this.remoteDescriptionSet = false;
    this.heldCandidates = [];
    if (reason !== null) {
      this.cb.onError(reason);
    }
    if (this.state !== "disconnected") {
      this.setState(this.registered ? "registered" : "disconnected");
    }
  }

  private onSocketGone(): void {
    const deliberate = this.leaving;
    this.resetAll();
    if (!deliberate) {
      this.cb.onError("gateway connection lost");
    }
  }

  /** Detach handlers before closing so our own teardown never echoes back. */
  private closeCallObjects(): void {
    const channel = this.channel;
    const pc = this.pc;
    this.channel = null;
    this.pc = null;
    if (channel !== null) {
      channel.onopen = null;
      channel.onmessage = null;
      channel.onclose = null;
      channel.close();
    }
    pc?.close();
  }

  private resetAll(): void {
    this.clearCallTimer();
    this.closeCallObjects();
    this.session = null;
    this.remoteName = null;
    this.seqOut = 0;
    this.remoteDescriptionSet = false;
    this.heldCandidates = [];
    if (this.socket !== null) {
      this.socket.onopen = null;
      this.socket.onmessage = null;
      this.socket.onclose = null;
      this.socket.onerror = null;
    }
    this.socket = null;
    this.registered = false;
    this.setState("disconnected");
  }

  private setState(state: ClientState): void {
    if (state !== this.state) {
      this.state = state;
      this.cb.onState(state);
    }
  }
}
