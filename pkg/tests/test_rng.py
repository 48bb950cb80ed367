import math

import numpy as np
from hypothesis import given, strategies as st

from adapterlab.rng import Rng, splitmix64, stable_hash


def test_reference_stream_is_frozen():
    # recorded once; a change here silently changes every generated artifact
    r = Rng(0)
    assert [r.next_u64() for _ in range(3)] == [8916199331640804048, 16032783972208265725, 12954103179475586193]
    r = Rng(42)
    assert [r.randint(10) for _ in range(8)] == [2, 3, 9, 3, 2, 3, 1, 9]


def test_splitmix_known_value():
    # splitmix64(0) from the public reference implementation
    assert splitmix64(0) == 0xE220A8397B1DCDAF


def test_stable_hash_ignores_hash_seed():
    assert stable_hash("abc") == int.from_bytes(
        bytes.fromhex("ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad")[:8], "little")


@given(st.integers(min_value=0, max_value=2**64 - 1))
def test_same_seed_same_stream(seed):
    a, b = Rng(seed), Rng(seed)
    assert [a.next_u64() for _ in range(5)] == [b.next_u64() for _ in range(5)]


def test_fork_does_not_advance_parent():
    r = Rng(3)
    state = r._state
    r.fork("x")
    assert r._state == state
    assert r.fork("x").next_u64() == Rng(3).fork("x").next_u64()
    assert r.fork("x").next_u64() != r.fork("y").next_u64()


@given(st.integers(min_value=1, max_value=1000), st.integers(min_value=0, max_value=2**32))
def test_randint_in_range(n, seed):
    r = Rng(seed)
    assert all(0 <= r.randint(n) < n for _ in range(20))


def test_random_uniform_moments():
    r = Rng(11)
    x = np.array([r.random() for _ in range(20000)])
    assert x.min() >= 0.0 and x.max() < 1.0
    assert abs(x.mean() - 0.5) < 3 * math.sqrt(1 / 12 / len(x))


def test_normal_moments():
    x = Rng(5).normal_array(20000, std=2.0).astype(np.float64)
    assert abs(x.mean()) < 3 * 2.0 / math.sqrt(len(x))
    assert abs(x.std() - 2.0) < 0.05


@given(st.integers(min_value=0, max_value=200), st.integers(min_value=0, max_value=2**32))
def test_permutation_is_a_permutation(n, seed):
    assert sorted(Rng(seed).permutation(n)) == list(range(n))


def test_xorshift_star_matches_textbook_recurrence():
    m = (1 << 64) - 1
    x = splitmix64(9)
    r = Rng(9)
    for _ in range(4):
        x ^= x >> 12
        x ^= (x << 25) & m
        x ^= x >> 27
        assert r.next_u64() == (x * 0x2545F4914F6CDD1D) & m
