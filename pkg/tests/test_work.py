import time
from contextlib import aclosing

import numpy as np
import pytest

from risotto.linalg import RngStream
from risotto.work import Volume, WorkContext, mean_and_stderr, parallel_map


async def identity(x: int) -> int:
    return x


@pytest.mark.parametrize("p", [1, 2, 3, 4])
async def test_parallel_map(p: int) -> None:
    input = [1, 2, 3]
    async with parallel_map(input, identity, parallelism=p) as mapped:
        values = [x async for x in mapped]
    assert values == input


@pytest.mark.parametrize("p", [1, 2, 3, 4])
async def test_worker_map(p: int) -> None:
    work = WorkContext(parallelism=p)

    input = range(1000)

    i = 0
    async with aclosing(work.map(input, identity)) as mapped:
        async for x in mapped:
            assert input[i] == x
            i += 1
    assert i == len(input)


async def test_worker_map_stops_early() -> None:
    work = WorkContext(parallelism=2)
    seen = []
    async with aclosing(work.map(range(1000), identity)) as mapped:
        async for x in mapped:
            seen.append(x)
            if x == 10:
                break
    assert seen == list(range(11))


async def test_worker_map_of_nothing() -> None:
    work = WorkContext(parallelism=4)
    async with aclosing(work.map([], identity)) as mapped:
        assert [x async for x in mapped] == []


@pytest.mark.parametrize("p", [1, 2, 8])
async def test_map_threads_keeps_input_order(p: int) -> None:
    work = WorkContext(parallelism=p)

    def slow_square(x: int) -> int:
        # Early items finish last when run concurrently.
        time.sleep(0.001 * (20 - x))
        return x * x

    assert await work.map_threads(range(20), slow_square) == [x * x for x in range(20)]


async def test_map_threads_reductions_do_not_depend_on_thread_count() -> None:
    def draw(i: int) -> float:
        return float(RngStream(3).substream(i).generator().standard_normal())

    one = await WorkContext(parallelism=1).map_threads(range(50), draw)
    many = await WorkContext(parallelism=6).map_threads(range(50), draw)
    assert mean_and_stderr(one) == mean_and_stderr(many)


def test_mean_and_stderr() -> None:
    mean, stderr = mean_and_stderr([1.0, 2.0, 3.0, 4.0])
    assert mean == 2.5
    assert stderr == pytest.approx(np.std([1, 2, 3, 4], ddof=1) / 2)


def test_mean_and_stderr_needs_two_samples() -> None:
    with pytest.raises(ValueError):
        mean_and_stderr([1.0])


@pytest.mark.parametrize(
    "volume, expected",
    [
        (Volume.quiet, []),
        (Volume.normal, ["warn", "note"]),
        (Volume.verbose, ["warn", "note", "info"]),
        (Volume.debug, ["warn", "note", "info", "debug"]),
    ],
)
def test_reports_respect_volume(
    volume: Volume, expected: list[str], capsys: pytest.CaptureFixture[str]
) -> None:
    work = WorkContext(volume=volume)
    work.warn("warn")
    work.note("note")
    work.info("info")
    work.debug("debug")
    captured = capsys.readouterr()
    assert captured.out == ""
    assert captured.err.split() == expected
