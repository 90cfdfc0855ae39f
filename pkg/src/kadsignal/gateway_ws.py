"""WebSocket front end for a gateway.

Browsers cannot speak the UDP wire protocol, so a gateway exposes a thin
WebSocket endpoint instead: one socket per client, one JSON frame per
message, the frame grammar of `overlay.Gateway`. This module only adapts
transports; every decision about names, sessions and relaying lives in
the overlay.
"""

from __future__ import annotations

import asyncio
import json
import logging

from websockets.asyncio.server import serve
from websockets.exceptions import ConnectionClosed

from .overlay import Gateway

log = logging.getLogger(__name__)

WS_PATH = "/ws"

# Frames a client may send are small JSON objects around a <= 64 KiB blob.
MAX_WS_MESSAGE = 80 * 1024


class WsPipe:
    """Adapts a websocket connection to the pipe interface a Gateway expects.

    Gateway callbacks run synchronously inside the event loop, but
    websocket sends are coroutines, so outbound frames pass through a
    queue drained by a single writer task. That also keeps frame order.
    """

    def __init__(self, websocket):
        self.websocket = websocket
        self.closed = False
        self._outbox: asyncio.Queue = asyncio.Queue()
        self._writer = asyncio.ensure_future(self._drain())

    def send(self, frame: dict) -> None:
        if not self.closed:
            self._outbox.put_nowait(json.dumps(frame, sort_keys=True, separators=(",", ":")))

    def close(self) -> None:
        if not self.closed:
            self.closed = True
            self._outbox.put_nowait(None)

    async def _drain(self) -> None:
        try:
            while True:
                item = await self._outbox.get()
                if item is None:
                    break
                await self.websocket.send(item)
        except ConnectionClosed:
            pass
        finally:
            self.closed = True
            await self.websocket.close()


async def serve_gateway(gateway: Gateway, host: str, port: int):
    """Start a WebSocket server for `gateway`; returns the server object.

    The caller owns the event loop; the server keeps accepting clients
    until closed. Connections on any path other than /ws are refused.
    """

    async def handler(websocket):
        if websocket.request.path != WS_PATH:
            await websocket.close(code=1008, reason="unknown path")
            return
        pipe = WsPipe(websocket)
        conn = gateway.attach(pipe)
        try:
            async for raw in websocket:
                gateway.handle_client_text(conn, raw)
        except ConnectionClosed:
            pass
        finally:
            gateway.detach(conn)
            await pipe._writer

    server = await serve(handler, host, port, max_size=MAX_WS_MESSAGE)
    log.info("gateway websocket listening on ws://%s:%d%s", host, port, WS_PATH)
    return server
