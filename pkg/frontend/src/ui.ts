/** DOM wiring: one CallClient bound to the page controls. */

import {
  CallClient,
  ClientState,
  PeerConnectionLike,
  SocketLike,
} from "./client.js";

function el<T extends HTMLElement>(id: string): T {
  const found = document.getElementById(id);
  if (found === null) {
    throw new Error(`missing element #${id}`);
  }
  return found as T;
}

const nameInput = el<HTMLInputElement>("name");
const gatewayInput = el<HTMLInputElement>("gateway");
const stunInput = el<HTMLInputElement>("stun");
const registerButton = el<HTMLButtonElement>("register");
const leaveButton = el<HTMLButtonElement>("leave");
const callInput = el<HTMLInputElement>("callee");
const callButton = el<HTMLButtonElement>("call");
const hangupButton = el<HTMLButtonElement>("hangup");
const chatInput = el<HTMLInputElement>("message");
const sendButton = el<HTMLButtonElement>("send");
const transcript = el<HTMLDivElement>("transcript");
const stateBadge = el<HTMLSpanElement>("state");

function line(kind: "me" | "peer" | "note", who: string, text: string): void {
  const row = document.createElement("div");
  row.className = `line ${kind}`;
  row.textContent = kind === "note" ? text : `${who}: ${text}`;
  transcript.appendChild(row);
  transcript.scrollTop = transcript.scrollHeight;
}

const client = new CallClient(
  {
    makeSocket: (url) => new WebSocket(url) as unknown as SocketLike,
    makePeerConnection: () => {
      const stun = stunInput.value.trim();
      const config: RTCConfiguration = stun ? { iceServers: [{ urls: [stun] }] } : {};
      return new RTCPeerConnection(config) as unknown as PeerConnectionLike;
    },
  },
  {
    onState: (state: ClientState) => {
      stateBadge.textContent = state;
      stateBadge.dataset.state = state;
      const registered = state !== "disconnected";
      registerButton.disabled = registered;
      nameInput.disabled = registered;
      gatewayInput.disabled = registered;
      leaveButton.disabled = !registered;
      callButton.disabled = state !== "registered";
      callInput.disabled = state !== "registered";
      hangupButton.disabled = state !== "calling" && state !== "in-call";
      const chatting = state === "in-call";
      chatInput.disabled = !chatting;
      sendButton.disabled = !chatting;
      if (state === "in-call") {
        line("note", "", `connected to ${client.remoteName ?? "peer"}; chat is peer-to-peer now`);
      }
    },
    onChat: (from, text) => line("peer", from, text),
    onError: (message) => line("note", "", `! ${message}`),
  },
);

registerButton.onclick = () => {
  client.register(nameInput.value.trim(), gatewayInput.value.trim());
};
leaveButton.onclick = () => client.leave();
callButton.onclick = () => client.call(callInput.value.trim());
hangupButton.onclick = () => client.hangUp();

function sendChat(): void {
  const text = chatInput.value;
  if (text.length === 0) {
    return;
  }
  client.chat(text);
  line("me", client.myName, text);
  chatInput.value = "";
}
sendButton.onclick = sendChat;
chatInput.onkeydown = (ev) => {
  if (ev.key === "Enter") {
    sendChat();
  }
};

stateBadge.textContent = client.state;
