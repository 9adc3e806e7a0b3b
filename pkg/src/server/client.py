"""Async clients: one connection per server, and a routing cluster client with retries."""

import asyncio
import logging
from typing import Dict, Optional

import numpy as np

from ..models.data_models import RouteTable
from ..utils.exceptions import ProtocolError, ServerRequestError, ServerUnavailableError
from . import protocol
from .partition import Router

logger = logging.getLogger(__name__)

RETRY_BASE_DELAY = 0.05
RETRY_MAX_DELAY = 2.0


def parse_address(address: str) -> tuple:
    host, _, port = address.rpartition(":")
    return host or "127.0.0.1", int(port)


class ParamClient:
    """A single connection to one parameter server.

    Requests on one connection are serialized with a lock; use one client per
    concurrent stream of requests.
    """

    def __init__(self, address: str, tag: Optional[str] = None):
        self.address = address
        self.tag = tag
        self._reader: Optional[asyncio.StreamReader] = None
        self._writer: Optional[asyncio.StreamWriter] = None
        self._lock = asyncio.Lock()

    @property
    def connected(self) -> bool:
        return self._writer is not None and not self._writer.is_closing()

    async def connect(self) -> None:
        host, port = parse_address(self.address)
        self._reader, self._writer = await asyncio.open_connection(host, port)
        if self.tag:
            await self._request(protocol.encode_request(protocol.OP_TAG, tag=self.tag))

    async def close(self) -> None:
        if self._writer is not None:
            self._writer.close()
            try:
                await self._writer.wait_closed()
            except ConnectionError:
                pass
            self._writer = None
            self._reader = None

    async def _request(self, frame: bytes) -> tuple:
        async with self._lock:
            if not self.connected:
                raise ConnectionResetError(f"not connected to {self.address}")
            self._writer.write(frame)
            await self._writer.drain()
            try:
                body = await protocol.read_frame(self._reader)
            except asyncio.IncompleteReadError as e:
                raise ConnectionResetError(f"{self.address} closed the connection") from e
        if not body:
            raise ProtocolError(f"empty response from {self.address}")
        status, payload = body[0], body[1:]
        if status == protocol.STATUS_ERROR:
            raise ServerRequestError(
                f"{self.address}: {payload.decode('utf-8', errors='replace')}", status=status, server=self.address
            )
        return status, payload

    async def get_rows(self, vtype: int, ids: np.ndarray) -> np.ndarray:
        """Rows in request order as float64, shape (len(ids), D)."""
        _, payload = await self._request(protocol.encode_request(protocol.OP_GET, vtype, ids))
        return protocol.decode_rows(payload)

    async def put_rows(self, vtype: int, ids: np.ndarray, values: np.ndarray) -> np.ndarray:
        """Overwrite rows; returns the ids the server rejected (empty on full success)."""
        _, payload = await self._request(protocol.encode_request(protocol.OP_PUT, vtype, ids, values))
        return protocol.decode_rejected(payload)

    async def stats(self) -> Dict[str, int]:
        _, payload = await self._request(protocol.encode_request(protocol.OP_STATS))
        return protocol.decode_stats(payload)

    async def shutdown(self) -> None:
        await self._request(protocol.encode_request(protocol.OP_SHUTDOWN))

    async def __aenter__(self) -> "ParamClient":
        await self.connect()
        return self

    async def __aexit__(self, *exc) -> None:
        await self.close()


class ClusterClient:
    """Routes row requests to the owning servers and reassembles them in request order.

    Connection failures are retried with capped exponential backoff; after
    `max_retries` attempts the call raises ServerUnavailableError.
    """

    def __init__(
        self,
        routes: RouteTable,
        tag: Optional[str] = None,
        max_retries: int = 5,
        base_delay: float = RETRY_BASE_DELAY,
        max_delay: float = RETRY_MAX_DELAY,
    ):
        self.routes = routes
        self.router = Router(routes)
        self.tag = tag
        self.max_retries = max_retries
        self.base_delay = base_delay
        self.max_delay = max_delay
        self._clients: Dict[int, ParamClient] = {
            sid: ParamClient(routes.servers[sid], tag) for sid in self.router.server_ids()
        }

    async def connect(self) -> None:
        await asyncio.gather(*(self._ensure(sid) for sid in self._clients))

    async def close(self) -> None:
        await asyncio.gather(*(client.close() for client in self._clients.values()))

    async def _ensure(self, server_id: int) -> ParamClient:
        client = self._clients[server_id]
        attempt = 0
        while not client.connected:
            try:
                await client.connect()
            except OSError as e:
                attempt = await self._backoff(server_id, attempt, e)
        return client

    async def _backoff(self, server_id: int, attempt: int, error: Exception) -> int:
        address = self._clients[server_id].address
        if attempt >= self.max_retries:
            logger.error(f"Server {server_id} at {address} unreachable after {attempt + 1} attempts: {error}")
            raise ServerUnavailableError(
                f"server {server_id} at {address} unreachable", address=address, attempts=attempt + 1,
                original_error=error,
            )
        delay = min(self.max_delay, self.base_delay * (2 ** attempt))
        logger.warning(f"Server {server_id} at {address}: {error}; retry {attempt + 1} in {delay:.2f}s")
        await asyncio.sleep(delay)
        return attempt + 1

    async def _call(self, server_id: int, method: str, *args):
        attempt = 0
        while True:
            client = await self._ensure(server_id)
            try:
                return await getattr(client, method)(*args)
            except OSError as e:
                await client.close()
                attempt = await self._backoff(server_id, attempt, e)

    def _split(self, vtype: int, ids: np.ndarray) -> Dict[int, np.ndarray]:
        owners = self.router.route(vtype, ids)
        return {int(sid): np.flatnonzero(owners == sid) for sid in np.unique(owners)}

    async def get_rows(self, vtype: int, ids: np.ndarray) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        out = np.empty((ids.shape[0], self.routes.dim), dtype=np.float64)
        if ids.shape[0] == 0:
            return out
        parts = self._split(vtype, ids)
        results = await asyncio.gather(*(self._call(sid, "get_rows", vtype, ids[pos]) for sid, pos in parts.items()))
        for pos, rows in zip(parts.values(), results):
            out[pos] = rows
        return out

    async def put_rows(self, vtype: int, ids: np.ndarray, values: np.ndarray) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.shape[0] == 0:
            return ids
        parts = self._split(vtype, ids)
        rejected = await asyncio.gather(
            *(self._call(sid, "put_rows", vtype, ids[pos], values[pos]) for sid, pos in parts.items())
        )
        return np.concatenate(rejected)

    async def fetch_table(self, vtype: int, chunk: int = 1 << 16) -> np.ndarray:
        """Every row of one vertex type, in id order."""
        count = self.routes.type_counts[vtype]
        out = np.empty((count, self.routes.dim), dtype=np.float64)
        for start in range(0, count, chunk):
            stop = min(start + chunk, count)
            out[start:stop] = await self.get_rows(vtype, np.arange(start, stop, dtype=np.int64))
        return out

    async def stats(self) -> Dict[int, Dict[str, int]]:
        sids = list(self._clients)
        results = await asyncio.gather(*(self._call(sid, "stats") for sid in sids))
        return dict(zip(sids, results))

    async def shutdown(self) -> None:
        for sid in self._clients:
            try:
                await self._call(sid, "shutdown")
            except ServerUnavailableError:
                logger.warning(f"Server {sid} was already gone at shutdown")
        await self.close()

    async def __aenter__(self) -> "ClusterClient":
        await self.connect()
        return self

    async def __aexit__(self, *exc) -> None:
        await self.close()


def summed_stats(per_server: Dict[int, Dict[str, int]]) -> Dict[str, int]:
    total: Dict[str, int] = {}
    for stats in per_server.values():
        for key, value in stats.items():
            total[key] = total.get(key, 0) + value
    return total


def tagged(stats: Dict[str, int], counter: str, tag: str) -> int:
    return stats.get(f"{counter}.{tag}", 0)
