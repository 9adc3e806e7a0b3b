"""Asyncio parameter server holding row ranges of one vertex type's table.

Every served row is its own read-only array, and a PUT swaps in fresh row
arrays. A reader therefore sees either the old or the new version of each
row. This holds for requests served on the event loop and for large ones
whose gathers and scatters run in worker threads. No locks are taken.
"""

import asyncio
import json
import logging
from collections import Counter
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from ..embedding.checkpoint import read_checkpoint
from ..utils.exceptions import DimensionMismatchError, GrembedError, ProtocolError, VertexRangeError
from . import protocol

logger = logging.getLogger(__name__)

ANONYMOUS_TAG = "anon"

# Requests moving at least this many values run their row copies off the event loop.
OFFLOAD_VALUES = 4096


def _frozen(row: np.ndarray, dtype: np.dtype) -> np.ndarray:
    row = np.array(row, dtype=dtype)
    row.flags.writeable = False
    return row


class ServerState:
    """Rows [start, stop) of one vertex type for each assigned range, plus request counters."""

    def __init__(self, server_id: int, vtype: int, ranges: Sequence[Tuple[int, int]], values: np.ndarray):
        self.server_id = server_id
        self.vtype = vtype
        self.ranges: List[Tuple[int, int]] = sorted((int(a), int(b)) for a, b in ranges)
        self.counters: Counter = Counter()
        sizes = [stop - start for start, stop in self.ranges]
        if sum(sizes) != values.shape[0]:
            raise DimensionMismatchError(
                "table rows must equal the total length of the served ranges",
                expected=sum(sizes), actual=int(values.shape[0]),
            )
        self.dtype = values.dtype
        self._dim = int(values.shape[1])
        self._rows = [_frozen(row, self.dtype) for row in values]
        self._starts = np.array([a for a, _ in self.ranges], dtype=np.int64)
        self._stops = np.array([b for _, b in self.ranges], dtype=np.int64)
        self._offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64) if sizes else self._starts

    @classmethod
    def from_checkpoint(
        cls,
        path: Union[str, Path],
        server_id: int,
        vtype: int,
        ranges: Sequence[Tuple[int, int]],
    ) -> "ServerState":
        """Load only the assigned row ranges of a table checkpoint."""
        parts = [read_checkpoint(path, start, stop).values for start, stop in sorted(ranges)]
        values = np.concatenate(parts) if parts else np.empty((0, 1))
        logger.info(f"Server {server_id} loaded {values.shape[0]} rows of type {vtype} from {path}")
        return cls(server_id, vtype, list(ranges), values)

    @property
    def dim(self) -> int:
        return self._dim

    @property
    def values(self) -> np.ndarray:
        """A copy of every served row, in local order."""
        if not self._rows:
            return np.empty((0, self._dim), dtype=self.dtype)
        return np.stack(self._rows)

    def locate(self, ids: np.ndarray) -> np.ndarray:
        """Local row slots for global ids; VertexRangeError names the first id not served here."""
        slot = np.searchsorted(self._starts, ids, side="right") - 1
        inside = slot >= 0
        inside[inside] &= ids[inside] < self._stops[slot[inside]]
        if not inside.all():
            bad = int(ids[np.flatnonzero(~inside)[0]])
            raise VertexRangeError(
                f"vertex {bad} of type {self.vtype} is not served by server {self.server_id}",
                vtype=self.vtype, vertex_id=bad,
            )
        return self._offsets[slot] + ids - self._starts[slot]

    def check_width(self, values: np.ndarray) -> None:
        if values.shape[1] != self._dim:
            raise DimensionMismatchError(
                f"PUT carries D={values.shape[1]}, table has D={self._dim}", expected=self._dim,
                actual=int(values.shape[1]),
            )

    def gather(self, local: np.ndarray) -> np.ndarray:
        rows = self._rows
        picked = [rows[slot] for slot in local.tolist()]
        if not picked:
            return np.empty((0, self._dim), dtype=np.float64)
        return np.array(picked, dtype=np.float64)

    def scatter(self, local: np.ndarray, values: np.ndarray) -> np.ndarray:
        """Swap in finite rows; returns the mask of rows written."""
        finite = np.isfinite(values).all(axis=1)
        rows = self._rows
        for slot, row in zip(local[finite].tolist(), values[finite]):
            rows[slot] = _frozen(row, self.dtype)
        return finite

    def count_get(self, n_rows: int, tag: str) -> None:
        self.counters["get_requests"] += 1
        self.counters["rows_read"] += n_rows
        self.counters[f"get_requests.{tag}"] += 1
        self.counters[f"rows_read.{tag}"] += n_rows

    def count_put(self, ids: np.ndarray, finite: np.ndarray, tag: str) -> np.ndarray:
        """Record one PUT; returns the rejected ids."""
        written = int(finite.sum())
        rejected = ids[~finite]
        self.counters["put_requests"] += 1
        self.counters["rows_written"] += written
        self.counters["rows_rejected"] += int(rejected.shape[0])
        self.counters[f"put_requests.{tag}"] += 1
        self.counters[f"rows_written.{tag}"] += written
        if rejected.shape[0]:
            logger.warning(f"Server {self.server_id} rejected {rejected.shape[0]} non-finite row(s)")
        return rejected

    def get_rows(self, ids: np.ndarray, tag: str = ANONYMOUS_TAG) -> np.ndarray:
        rows = self.gather(self.locate(ids))
        self.count_get(ids.shape[0], tag)
        return rows

    def put_rows(self, ids: np.ndarray, values: np.ndarray, tag: str = ANONYMOUS_TAG) -> np.ndarray:
        """Overwrite whole rows; non-finite rows are rejected and their ids returned."""
        self.check_width(values)
        finite = self.scatter(self.locate(ids), values)
        return self.count_put(ids, finite, tag)

    def stats(self) -> dict:
        base = {key: 0 for key in (
            "get_requests", "put_requests", "rows_read", "rows_written", "rows_rejected", "protocol_errors",
        )}
        base.update(self.counters)
        base["rows"] = len(self._rows)
        return base


class ParamServer:
    """Serves GET/PUT/STATS/TAG/SHUTDOWN frames for one ServerState."""

    def __init__(
        self,
        state: ServerState,
        host: str = "127.0.0.1",
        port: int = 0,
        max_frame: int = protocol.MAX_FRAME,
        offload_values: int = OFFLOAD_VALUES,
    ):
        self.state = state
        self.host = host
        self.port = port
        self.max_frame = max_frame
        self.offload_values = offload_values
        self._server: Optional[asyncio.AbstractServer] = None
        self._stopped = asyncio.Event()
        self._writers: set = set()

    async def start(self) -> int:
        """Bind and start accepting; returns the bound port."""
        self._server = await asyncio.start_server(self._handle, self.host, self.port)
        self.port = self._server.sockets[0].getsockname()[1]
        logger.info(f"Server {self.state.server_id} listening on {self.host}:{self.port}")
        return self.port

    async def wait_closed(self) -> None:
        await self._stopped.wait()
        self._server.close()
        for writer in list(self._writers):
            writer.close()
        await self._server.wait_closed()
        logger.info(f"Server {self.state.server_id} stopped: {dict(self.state.stats())}")

    def shutdown(self) -> None:
        self._stopped.set()

    async def serve(self) -> None:
        if self._server is None:
            await self.start()
        await self.wait_closed()

    async def _rows_op(self, fn: Callable, local: np.ndarray, *args):
        if local.shape[0] * self.state.dim >= self.offload_values:
            return await asyncio.to_thread(fn, local, *args)
        return fn(local, *args)

    async def _dispatch(self, request: protocol.Request, tag: str) -> Tuple[bytes, Optional[str]]:
        """Handle one decoded request; returns the response and the connection's (new) tag."""
        state = self.state
        if request.opcode == protocol.OP_TAG:
            return protocol.encode_response(protocol.STATUS_OK), request.tag or ANONYMOUS_TAG
        if request.opcode == protocol.OP_STATS:
            return protocol.encode_response(protocol.STATUS_OK, protocol.encode_stats(state.stats())), tag
        if request.opcode == protocol.OP_SHUTDOWN:
            self.shutdown()
            return protocol.encode_response(protocol.STATUS_OK), tag
        if request.vtype != state.vtype:
            raise VertexRangeError(f"server {state.server_id} holds type {state.vtype}, not {request.vtype}",
                                   vtype=request.vtype)
        local = state.locate(request.ids)
        if request.opcode == protocol.OP_GET:
            rows = await self._rows_op(state.gather, local)
            state.count_get(local.shape[0], tag)
            return protocol.encode_response(protocol.STATUS_OK, protocol.encode_rows(rows)), tag
        state.check_width(request.values)
        finite = await self._rows_op(state.scatter, local, request.values)
        rejected = state.count_put(request.ids, finite, tag)
        status = protocol.STATUS_PARTIAL if rejected.shape[0] else protocol.STATUS_OK
        return protocol.encode_response(status, protocol.encode_rejected(rejected)), tag

    async def _handle(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        tag = ANONYMOUS_TAG
        self.state.counters["connections"] += 1
        self._writers.add(writer)
        try:
            while not self._stopped.is_set():
                try:
                    body = await protocol.read_frame(reader, self.max_frame)
                    response, tag = await self._dispatch(protocol.decode_request(body), tag)
                except asyncio.IncompleteReadError:
                    break
                except ProtocolError as e:
                    self.state.counters["protocol_errors"] += 1
                    response = protocol.encode_response(protocol.STATUS_ERROR, e.message.encode("utf-8"))
                except GrembedError as e:
                    self.state.counters["request_errors"] += 1
                    response = protocol.encode_response(protocol.STATUS_ERROR, e.message.encode("utf-8"))
                writer.write(response)
                await writer.drain()
        except ConnectionError:
            logger.debug(f"Client of server {self.state.server_id} dropped its connection")
        finally:
            self._writers.discard(writer)
            writer.close()


async def run_server(
    checkpoint: Union[str, Path],
    server_id: int,
    vtype: int,
    ranges: Sequence[Tuple[int, int]],
    host: str = "127.0.0.1",
    port: int = 0,
) -> dict:
    """Load, bind, announce the port as a JSON line on stdout, serve until SHUTDOWN."""
    state = ServerState.from_checkpoint(checkpoint, server_id, vtype, ranges)
    server = ParamServer(state, host, port)
    bound = await server.start()
    print(json.dumps({"event": "listening", "server_id": server_id, "host": host, "port": bound}), flush=True)
    await server.wait_closed()
    return state.stats()
