"""Tests for the parameter server, its wire protocol and the async clients."""

import asyncio
import json
import multiprocessing
import os
import socket
import struct
import subprocess
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from contextlib import asynccontextmanager, contextmanager
from pathlib import Path

import numpy as np
import pytest

from src.embedding.checkpoint import write_checkpoint
from src.embedding.core import init_embeddings
from src.models.data_models import RouteRange, RouteTable
from src.server import protocol
from src.server.client import ClusterClient, ParamClient, summed_stats, tagged
from src.server.param_server import ParamServer, ServerState
from src.utils.exceptions import (
    ProtocolError,
    ServerRequestError,
    ServerUnavailableError,
    VertexRangeError,
)

DIM = 4


def make_state(rows=100, server_id=0, vtype=0, start=0, seed=0):
    values = init_embeddings(rows, DIM, seed).values
    return ServerState(server_id, vtype, [(start, start + rows)], values)


@asynccontextmanager
async def serving(state, **options):
    """Run a ParamServer on an ephemeral port for the duration of the block."""
    server = ParamServer(state, **options)
    await server.start()
    closed = asyncio.create_task(server.wait_closed())
    try:
        yield server
    finally:
        server.shutdown()
        await asyncio.wait_for(closed, 5)


def address(server):
    return f"127.0.0.1:{server.port}"


def free_port():
    with socket.socket() as sock:
        sock.bind(("127.0.0.1", 0))
        return sock.getsockname()[1]


class TestProtocol:
    """Test frame decoding edge cases."""

    def test_unknown_opcode(self):
        """Test unknown opcodes are rejected."""
        with pytest.raises(ProtocolError):
            protocol.decode_request(struct.pack("<BBI", 9, 0, 0))

    def test_short_put(self):
        """Test a PUT whose payload is short of n x D values is rejected."""
        frame = protocol.encode_request(protocol.OP_PUT, 0, np.array([1, 2]), np.ones((2, 3)))
        with pytest.raises(ProtocolError):
            protocol.decode_request(frame[4:-8])

    def test_put_shape_checked_on_encode(self):
        """Test values must have one row per id."""
        with pytest.raises(ProtocolError):
            protocol.encode_request(protocol.OP_PUT, 0, np.array([1]), np.ones((2, 3)))

    def test_tag_request(self):
        """Test TAG frames carry the client tag."""
        request = protocol.decode_request(protocol.encode_request(protocol.OP_TAG, tag="worker-3")[4:])
        assert request.opcode == protocol.OP_TAG
        assert request.tag == "worker-3"

    def test_stats_text(self):
        """Test STATS payloads are key=value lines."""
        payload = protocol.encode_stats({"get_requests": 3, "rows_read": 12})
        assert payload == b"get_requests=3\nrows_read=12"
        assert protocol.decode_stats(payload) == {"get_requests": 3, "rows_read": 12}


class TestServerState:
    """Test row storage and local indexing."""

    def test_from_checkpoint_reads_assigned_ranges(self, tmp_path):
        """Test a server loads only its row ranges and indexes them by global id."""
        table = init_embeddings(20, DIM, seed=1)
        write_checkpoint(table, tmp_path / "V.gemb")
        state = ServerState.from_checkpoint(tmp_path / "V.gemb", 0, 0, [(15, 20), (5, 10)])
        assert state.values.shape == (10, DIM)
        rows = state.get_rows(np.array([16, 5]))
        np.testing.assert_array_equal(rows, table.values[[16, 5]])
        with pytest.raises(VertexRangeError):
            state.get_rows(np.array([12]))

    def test_values_must_match_ranges(self):
        """Test the table length must equal the served range length."""
        with pytest.raises(Exception):
            ServerState(0, 0, [(0, 5)], np.zeros((4, DIM)))


class TestParamServer:
    """Test the server over real sockets."""

    @pytest.mark.asyncio
    async def test_start_and_shutdown(self):
        """Test a server with no traffic reports zero counters and stops on SHUTDOWN."""
        server = ParamServer(make_state())
        await server.start()
        closed = asyncio.create_task(server.wait_closed())
        async with ParamClient(address(server)) as client:
            stats = await client.stats()
            assert stats["get_requests"] == 0
            assert stats["put_requests"] == 0
            assert stats["rows"] == 100
            await client.shutdown()
        await asyncio.wait_for(closed, 5)

    @pytest.mark.asyncio
    async def test_read_your_write(self):
        """Test a get after a put returns the put values in request order."""
        async with serving(make_state()) as server:
            async with ParamClient(address(server)) as client:
                values = np.arange(2 * DIM, dtype=np.float64).reshape(2, DIM)
                rejected = await client.put_rows(0, np.array([3, 5]), values)
                assert rejected.shape == (0,)
                rows = await client.get_rows(0, np.array([5, 3]))
                np.testing.assert_array_equal(rows, values[::-1])

    @pytest.mark.asyncio
    async def test_second_put_wins(self):
        """Test sequential puts to one row overwrite."""
        async with serving(make_state()) as server:
            async with ParamClient(address(server)) as client:
                await client.put_rows(0, np.array([9]), np.full((1, DIM), 1.0))
                await client.put_rows(0, np.array([9]), np.full((1, DIM), 2.0))
                assert (await client.get_rows(0, np.array([9]))).tolist() == [[2.0] * DIM]

    @pytest.mark.asyncio
    async def test_empty_and_duplicate_ids(self):
        """Test empty requests return an empty matrix and duplicates identical rows."""
        state = make_state()
        expected = state.values.copy()
        async with serving(state) as server:
            async with ParamClient(address(server)) as client:
                assert (await client.get_rows(0, np.array([], dtype=np.int64))).shape == (0, DIM)
                rows = await client.get_rows(0, np.array([1, 1, 4, 1]))
                np.testing.assert_array_equal(rows[0], rows[1])
                np.testing.assert_array_equal(rows[0], rows[3])
                np.testing.assert_array_equal(rows, expected[[1, 1, 4, 1]])
                assert np.all(np.abs(rows) <= 0.5 / DIM)

    @pytest.mark.asyncio
    async def test_request_errors_keep_the_connection(self):
        """Test out-of-range ids, a wrong type and a wrong D fail without closing the connection."""
        async with serving(make_state()) as server:
            async with ParamClient(address(server)) as client:
                with pytest.raises(ServerRequestError):
                    await client.get_rows(0, np.array([150]))
                with pytest.raises(ServerRequestError):
                    await client.get_rows(1, np.array([0]))
                with pytest.raises(ServerRequestError):
                    await client.put_rows(0, np.array([0]), np.ones((1, DIM + 1)))
                assert (await client.get_rows(0, np.array([0]))).shape == (1, DIM)
                assert (await client.stats())["request_errors"] == 3

    @pytest.mark.asyncio
    async def test_malformed_frame(self):
        """Test a malformed frame gets an ERROR response and the connection stays usable."""
        async with serving(make_state()) as server:
            reader, writer = await asyncio.open_connection("127.0.0.1", server.port)
            body = struct.pack("<BBI", 9, 0, 0)
            writer.write(struct.pack("<I", len(body)) + body)
            reply = await protocol.read_frame(reader)
            assert reply[0] == protocol.STATUS_ERROR
            writer.write(protocol.encode_request(protocol.OP_STATS))
            reply = await protocol.read_frame(reader)
            assert reply[0] == protocol.STATUS_OK
            assert protocol.decode_stats(reply[1:])["protocol_errors"] == 1
            writer.close()
            await writer.wait_closed()

    @pytest.mark.asyncio
    async def test_oversized_frame_keeps_connection(self):
        """Test a frame above the size limit is drained and answered with ERROR on a still-usable connection."""
        async with serving(make_state(), max_frame=64) as server:
            reader, writer = await asyncio.open_connection("127.0.0.1", server.port)
            writer.write(struct.pack("<I", 100) + bytes(100))
            writer.write(protocol.encode_request(protocol.OP_GET, 0, np.array([3])))
            await writer.drain()
            reply = await protocol.read_frame(reader)
            assert reply[0] == protocol.STATUS_ERROR
            assert b"exceeds" in reply[1:]
            reply = await protocol.read_frame(reader)
            assert reply[0] == protocol.STATUS_OK
            assert protocol.decode_rows(reply[1:]).shape == (1, DIM)
            writer.write(protocol.encode_request(protocol.OP_STATS))
            stats = protocol.decode_stats((await protocol.read_frame(reader))[1:])
            assert stats["protocol_errors"] == 1
            assert stats["get_requests"] == 1
            writer.close()
            await writer.wait_closed()

    @pytest.mark.asyncio
    async def test_large_requests_run_off_the_loop(self):
        """Test requests above the offload size give the same answers as inline ones."""
        state = make_state(rows=200)
        async with serving(state, offload_values=DIM * 50) as server:
            async with ParamClient(address(server)) as client:
                ids = np.arange(199, -1, -1)
                values = np.random.default_rng(0).normal(size=(200, DIM))
                assert (await client.put_rows(0, ids, values)).shape == (0,)
                np.testing.assert_array_equal(await client.get_rows(0, ids), values)
                np.testing.assert_array_equal(await client.get_rows(0, np.array([5])), values[[194]])
                stats = await client.stats()
        assert stats["rows_written"] == 200
        assert stats["rows_read"] == 201

    @pytest.mark.asyncio
    async def test_offloaded_writers_never_blend_rows(self):
        """Test concurrent large writes and reads of the same rows only ever see whole payloads."""
        state = make_state(rows=64)
        ids = np.arange(64)
        async with serving(state, offload_values=1) as server:
            clients = [ParamClient(address(server)) for _ in range(5)]
            await asyncio.gather(*(c.connect() for c in clients))

            async def write(w):
                payload = np.full((64, DIM), float(w + 1))
                for _ in range(50):
                    await clients[w].put_rows(0, ids, payload)

            async def read():
                for _ in range(100):
                    rows = await clients[4].get_rows(0, ids)
                    assert np.all(rows == rows[:, :1])

            await asyncio.gather(*(write(w) for w in range(4)), read())
            await asyncio.gather(*(c.close() for c in clients))

    @pytest.mark.asyncio
    async def test_non_finite_rows_rejected(self):
        """Test rows with NaN or Inf are rejected by id and leave stored values intact."""
        state = make_state()
        before = state.values[7].copy()
        async with serving(state) as server:
            async with ParamClient(address(server)) as client:
                values = np.ones((3, DIM))
                values[1, 2] = np.nan
                rejected = await client.put_rows(0, np.array([6, 7, 8]), values)
                assert rejected.tolist() == [7]
                rows = await client.get_rows(0, np.array([6, 7]))
                np.testing.assert_array_equal(rows[0], np.ones(DIM))
                np.testing.assert_array_equal(rows[1], before)
                assert (await client.stats())["rows_rejected"] == 1

    @pytest.mark.asyncio
    @pytest.mark.parametrize("repetition", range(10))
    async def test_concurrent_writers_never_blend_rows(self, repetition):
        """Test 8 writers x 1000 puts to one row leave exactly one writer's payload, never a mix."""
        async with serving(make_state()) as server:
            clients = [ParamClient(address(server)) for _ in range(9)]
            await asyncio.gather(*(c.connect() for c in clients))
            signatures = {float(w) for w in range(8)}

            async def write(w):
                for _ in range(1000):
                    await clients[w].put_rows(0, np.array([7]), np.full((1, DIM), float(w)))

            async def read():
                for _ in range(500):
                    row = (await clients[8].get_rows(0, np.array([7])))[0]
                    if row[0] in signatures:
                        assert np.all(row == row[0])

            await asyncio.gather(*(write(w) for w in range(8)), read())
            final = (await clients[8].get_rows(0, np.array([7])))[0]
            assert final[0] in signatures
            assert np.all(final == final[0])
            await asyncio.gather(*(c.close() for c in clients))

    @pytest.mark.asyncio
    async def test_concurrent_clients_match_mirror(self):
        """Test 4 clients mixing gets and puts see a table consistent with acknowledged puts."""
        state = make_state(rows=40)
        mirror = state.values.copy()
        async with serving(state) as server:
            clients = [ParamClient(address(server)) for _ in range(4)]
            await asyncio.gather(*(c.connect() for c in clients))

            async def session(c):
                rng = np.random.default_rng(c)
                owned = np.arange(c, 40, 4)
                for op in range(1000):
                    ids = rng.choice(owned, size=int(rng.integers(1, 5)))
                    if op % 3 == 0:
                        ids = np.unique(ids)
                        values = rng.normal(size=(ids.shape[0], DIM))
                        await clients[c].put_rows(0, ids, values)
                        mirror[ids] = values
                    else:
                        rows = await clients[c].get_rows(0, ids)
                        np.testing.assert_array_equal(rows, mirror[ids])

            await asyncio.gather(*(session(c) for c in range(4)))
            everything = await clients[0].get_rows(0, np.arange(40))
            np.testing.assert_array_equal(everything, mirror)
            await asyncio.gather(*(c.close() for c in clients))

    @pytest.mark.asyncio
    async def test_stats_by_tag(self):
        """Test counters are attributed to the connection's tag."""
        async with serving(make_state()) as server:
            async with ParamClient(address(server), tag="worker-1") as worker, \
                    ParamClient(address(server)) as anonymous:
                await worker.get_rows(0, np.array([1, 2]))
                await worker.get_rows(0, np.array([3]))
                await worker.put_rows(0, np.array([3]), np.zeros((1, DIM)))
                await anonymous.get_rows(0, np.array([4]))
                stats = await anonymous.stats()
        assert tagged(stats, "get_requests", "worker-1") == 2
        assert tagged(stats, "rows_read", "worker-1") == 3
        assert tagged(stats, "put_requests", "worker-1") == 1
        assert tagged(stats, "get_requests", "anon") == 1
        assert tagged(stats, "put_requests", "eval") == 0
        assert stats["get_requests"] == 3


class TestClusterClient:
    """Test routing across several servers."""

    @pytest.fixture
    def table(self):
        return init_embeddings(30, DIM, seed=5).values

    def make_routes(self, servers):
        ranges = [RouteRange(vtype=0, start=0, stop=12, server_id=0),
                  RouteRange(vtype=0, start=12, stop=30, server_id=1)]
        return RouteTable(type_labels=["V"], type_counts=[30], dim=DIM, ranges=ranges,
                          servers={i: address(s) for i, s in enumerate(servers)})

    @pytest.mark.asyncio
    async def test_routed_reads_and_writes(self, table):
        """Test requests spanning servers come back in request order."""
        first = ServerState(0, 0, [(0, 12)], table[:12].copy())
        second = ServerState(1, 0, [(12, 30)], table[12:].copy())
        async with serving(first) as a, serving(second) as b:
            async with ClusterClient(self.make_routes([a, b]), tag="t") as client:
                ids = np.array([29, 0, 13, 11, 12])
                np.testing.assert_array_equal(await client.get_rows(0, ids), table[ids])

                values = np.arange(5 * DIM, dtype=np.float64).reshape(5, DIM)
                assert (await client.put_rows(0, ids, values)).shape == (0,)
                expected = table.copy()
                expected[ids] = values
                np.testing.assert_array_equal(await client.fetch_table(0, chunk=7), expected)

                per_server = await client.stats()
                assert sorted(per_server) == [0, 1]
                total = summed_stats(per_server)
                assert total["put_requests.t"] == 2
                assert total["rows_written"] == 5

    @pytest.mark.asyncio
    async def test_unreachable_server(self):
        """Test a dead server raises ServerUnavailableError after the retries."""
        routes = RouteTable(type_labels=["V"], type_counts=[4], dim=DIM,
                            ranges=[RouteRange(vtype=0, start=0, stop=4, server_id=0)],
                            servers={0: f"127.0.0.1:{free_port()}"})
        client = ClusterClient(routes, max_retries=2, base_delay=0.001, max_delay=0.01)
        with pytest.raises(ServerUnavailableError) as exc_info:
            await client.get_rows(0, np.array([1]))
        assert exc_info.value.context["attempts"] == 3
        await client.close()

    @pytest.mark.asyncio
    async def test_reconnects_after_restart(self, table):
        """Test a call retries onto a server that comes back on the same port."""
        state = ServerState(0, 0, [(0, 30)], table.copy())
        first = ParamServer(state)
        port = await first.start()
        closed = asyncio.create_task(first.wait_closed())
        routes = RouteTable(type_labels=["V"], type_counts=[30], dim=DIM,
                            ranges=[RouteRange(vtype=0, start=0, stop=30, server_id=0)],
                            servers={0: f"127.0.0.1:{port}"})
        async with ClusterClient(routes, base_delay=0.01) as client:
            await client.get_rows(0, np.array([0]))
            first.shutdown()
            await asyncio.wait_for(closed, 5)
            async with serving_on(state, port):
                rows = await client.get_rows(0, np.array([2]))
                np.testing.assert_array_equal(rows[0], table[2])


@asynccontextmanager
async def serving_on(state, port):
    server = ParamServer(state, port=port)
    await server.start()
    closed = asyncio.create_task(server.wait_closed())
    try:
        yield server
    finally:
        server.shutdown()
        await asyncio.wait_for(closed, 5)


PROJECT_ROOT = Path(__file__).resolve().parents[1]


@contextmanager
def server_process(tmp_path, rows):
    """A `grembed server` child process over a fresh table; yields its port."""
    write_checkpoint(init_embeddings(rows, DIM, seed=0), tmp_path / "table.gemb")
    process = subprocess.Popen(
        [sys.executable, "-m", "src.cli", "--log-level", "WARNING", "server", "--checkpoint",
         str(tmp_path / "table.gemb"), "--server-id", "0", "--vtype", "0", "--ranges", f"0:{rows}"],
        stdout=subprocess.PIPE, stderr=subprocess.DEVNULL, cwd=str(PROJECT_ROOT), text=True,
    )
    try:
        event = json.loads(process.stdout.readline())
        assert event["event"] == "listening"
        yield event["port"]
    finally:
        process.kill()
        process.wait()


def disjoint_session(port, start, stop, n_requests):
    """Alternate 8-row gets and puts inside [start, stop); returns (started, finished) monotonic times."""

    async def session():
        rng = np.random.default_rng(start)
        batches = rng.integers(start, stop, size=(n_requests, 8))
        values = rng.normal(size=(8, DIM))
        async with ParamClient(f"127.0.0.1:{port}") as client:
            await client.get_rows(0, batches[0])
            started = time.monotonic()
            for i, ids in enumerate(batches):
                if i % 2:
                    await client.put_rows(0, np.unique(ids), values[: np.unique(ids).shape[0]])
                else:
                    await client.get_rows(0, ids)
            return started, time.monotonic()

    return asyncio.run(session())


@pytest.mark.slow
@pytest.mark.skipif((os.cpu_count() or 1) < 5, reason="needs a core for the server and one per client")
class TestDisjointRowThroughput:
    """Throughput of clients working on disjoint rows of one server."""

    def test_four_clients_double_throughput(self, tmp_path):
        """Test 4 clients on disjoint rows get at least twice the throughput of one client."""
        n_requests, rows = 3000, 4000
        with server_process(tmp_path, rows) as port, \
                ProcessPoolExecutor(4, mp_context=multiprocessing.get_context("fork")) as pool:
            started, finished = pool.submit(disjoint_session, port, 0, rows // 4, n_requests).result()
            single = n_requests / (finished - started)

            spans = list(pool.map(
                disjoint_session, [port] * 4, [c * rows // 4 for c in range(4)],
                [(c + 1) * rows // 4 for c in range(4)], [n_requests] * 4,
            ))
            together = 4 * n_requests / (max(f for _, f in spans) - min(s for s, _ in spans))

        assert together >= 2 * single
