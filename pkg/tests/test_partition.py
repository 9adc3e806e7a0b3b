"""Unit tests for partition planning and routing."""

import numpy as np
import pytest

from src.models.data_models import GIB, PartitionStrategy, RouteRange, RouteTable
from src.server.partition import Router, plan_partitions
from src.utils.exceptions import InfeasiblePartitionError, InvalidParametersError, VertexRangeError

GB = 10 ** 9


def assert_rows_partitioned(plan, counts):
    """Every type's row ranges tile [0, count) exactly; servers hold one type each."""
    for vtype, count in enumerate(counts):
        spans = sorted((a.row_start, a.row_stop) for a in plan.assignments if a.vtype == vtype)
        cursor = 0
        for start, stop in spans:
            assert start == cursor
            assert stop > start
            cursor = stop
        assert cursor == count
    for a in plan.assignments:
        assert plan.server_types[a.server_id] == a.vtype


class TestRowWise:
    """Test row-wise planning."""

    def test_empty(self):
        """Test no vertices give an empty plan."""
        assert plan_partitions([], 16, 8, GIB).n_servers == 0
        assert plan_partitions([0, 0], 16, 8, GIB).n_servers == 0

    def test_table_fits_one_server(self):
        """Test 10^6 x 128 x 4 bytes (512 MB) fits a 1 GiB server."""
        plan = plan_partitions([10 ** 6], 128, 4, GIB)
        assert plan.n_servers == 1
        assert plan.server_bytes == [512_000_000]

    def test_thirty_billion_vertices(self):
        """Test 30e9 vertices at D=300, 8 bytes, 256 GB need 282 servers."""
        plan = plan_partitions([30 * GB], 300, 8, 256 * GB)
        assert plan.n_servers == 282
        assert max(plan.server_bytes) <= 256 * GB
        assert sum(plan.server_bytes) == 30 * GB * 300 * 8

    def test_row_too_wide(self):
        """Test a single row above the cap is infeasible."""
        with pytest.raises(InfeasiblePartitionError) as exc_info:
            plan_partitions([10], 1000, 8, 4000)
        assert exc_info.value.context["violating_bytes"] == 8000

    def test_min_servers_per_type(self):
        """Test the per-type server floor, capped by the vertex count."""
        assert plan_partitions([100], 4, 8, GIB, min_servers_per_type=3).n_servers == 3
        assert plan_partitions([2], 4, 8, GIB, min_servers_per_type=3).n_servers == 2

    def test_types_never_share_servers(self):
        """Test each type gets its own servers."""
        plan = plan_partitions([10, 0, 7], 4, 8, 1000)
        assert_rows_partitioned(plan, [10, 0, 7])
        assert sorted(set(plan.server_types)) == [0, 2]

    def test_bad_capacity(self):
        """Test non-positive capacity is rejected."""
        with pytest.raises(InvalidParametersError):
            plan_partitions([10], 4, 8, 0)

    def test_random_feasible_plans(self):
        """Test 100 random plans respect the cap and tile every type."""
        rng = np.random.default_rng(0)
        for _ in range(100):
            counts = rng.integers(0, 5000, size=int(rng.integers(1, 4))).tolist()
            dim = int(rng.integers(1, 65))
            bpv = int(rng.choice([4, 8]))
            capacity = dim * bpv * int(rng.integers(1, 3000))
            plan = plan_partitions(counts, dim, bpv, capacity)
            assert all(b <= capacity for b in plan.server_bytes)
            assert_rows_partitioned(plan, counts)

    def test_random_frequency_plans(self):
        """Test first-fit-decreasing plans respect the cap and tile every type."""
        rng = np.random.default_rng(1)
        for _ in range(100):
            counts = rng.integers(1, 3000, size=int(rng.integers(1, 3))).tolist()
            dim = int(rng.integers(1, 33))
            capacity = dim * 8 * int(rng.integers(1, 1500))
            freqs = [rng.zipf(1.5, size=c).astype(np.int64) for c in counts]
            plan = plan_partitions(counts, dim, 8, capacity, frequencies=freqs,
                                   min_servers_per_type=int(rng.integers(1, 5)))
            assert all(b <= capacity for b in plan.server_bytes)
            assert_rows_partitioned(plan, counts)

    def test_frequency_balance(self):
        """Test hot rows are spread so no server takes much more than its share of requests."""
        freq = np.ones(1600, dtype=np.int64)
        freq[:100] = 50
        plan = plan_partitions([1600], 4, 8, GIB, frequencies=[freq], min_servers_per_type=4)
        loads = [0] * plan.n_servers
        for a in plan.assignments:
            loads[a.server_id] += int(freq[a.row_start:a.row_stop].sum())
        uniform = plan_partitions([1600], 4, 8, GIB, min_servers_per_type=4)
        uniform_loads = [int(freq[a.row_start:a.row_stop].sum()) for a in uniform.assignments]
        assert max(loads) < max(uniform_loads)

    def test_frequency_length_checked(self):
        """Test frequencies must cover every vertex of the type."""
        with pytest.raises(InvalidParametersError):
            plan_partitions([10], 4, 8, GIB, frequencies=[np.ones(9)])


class TestColumnWise:
    """Test column-wise planning."""

    def test_thirty_billion_column_fits(self):
        """Test one column of 30e9 vertices is 240 GB and fits a 256 GB server."""
        plan = plan_partitions([30 * GB], 300, 8, 256 * GB, PartitionStrategy.COLUMN_WISE)
        assert plan.column_bytes[0] == 240 * GB
        assert plan.n_servers == 300
        assert max(plan.server_bytes) <= 256 * GB

    def test_thirty_three_billion_infeasible(self):
        """Test one column of 33e9 vertices exceeds the cap."""
        with pytest.raises(InfeasiblePartitionError) as exc_info:
            plan_partitions([33 * GB], 300, 8, 256 * GB, PartitionStrategy.COLUMN_WISE)
        assert exc_info.value.context["violating_bytes"] == 264 * GB
        assert exc_info.value.context["capacity_bytes"] == 256 * GB

    def test_crossover_is_inclusive(self):
        """Test a column exactly at the cap fits and one more vertex does not."""
        plan_partitions([32 * GB], 300, 8, 256 * GB, PartitionStrategy.COLUMN_WISE)
        with pytest.raises(InfeasiblePartitionError):
            plan_partitions([32 * GB + 1], 300, 8, 256 * GB, PartitionStrategy.COLUMN_WISE)

    def test_servers_hold_whole_columns(self):
        """Test columns tile [0, D) and no type uses more than D servers."""
        rng = np.random.default_rng(2)
        for _ in range(100):
            counts = rng.integers(1, 10_000, size=int(rng.integers(1, 4))).tolist()
            dim = int(rng.integers(1, 40))
            capacity = max(counts) * 8 * int(rng.integers(1, 50))
            plan = plan_partitions(counts, dim, 8, capacity, PartitionStrategy.COLUMN_WISE)
            for vtype in range(len(counts)):
                cols = sorted((a.col_start, a.col_stop) for a in plan.assignments if a.vtype == vtype)
                assert len(cols) <= dim
                assert cols[0][0] == 0 and cols[-1][1] == dim
                assert all(a[1] == b[0] for a, b in zip(cols, cols[1:]))
            assert all(b <= capacity for b in plan.server_bytes)

    def test_column_plans_are_not_served(self):
        """Test only row-wise plans become route tables."""
        plan = plan_partitions([10], 4, 8, GIB, PartitionStrategy.COLUMN_WISE)
        with pytest.raises(ValueError):
            plan.to_route_table(["V"], [10], 4)


class TestRouter:
    """Test vertex-to-server routing."""

    @pytest.fixture
    def routes(self):
        plan = plan_partitions([10, 6], 4, 8, 4 * 8 * 4)
        return plan.to_route_table(["A", "B"], [10, 6], 4)

    def test_every_vertex_routes_to_its_range(self, routes):
        """Test each id lands on the server whose range holds it."""
        router = Router(routes)
        for vtype, count in enumerate(routes.type_counts):
            owners = router.route(vtype, np.arange(count))
            for r in routes.ranges_for(vtype):
                assert np.all(owners[r.start:r.stop] == r.server_id)

    def test_out_of_range(self, routes):
        """Test ids past the type's count have no route."""
        router = Router(routes)
        with pytest.raises(VertexRangeError):
            router.route(0, np.array([3, 10]))
        with pytest.raises(VertexRangeError):
            router.route(5, np.array([0]))

    def test_route_table_validates_tiling(self):
        """Test a route table whose ranges leave a gap is rejected."""
        with pytest.raises(ValueError):
            RouteTable(type_labels=["V"], type_counts=[10], dim=2, ranges=[
                RouteRange(vtype=0, start=0, stop=4, server_id=0),
                RouteRange(vtype=0, start=5, stop=10, server_id=1),
            ])
