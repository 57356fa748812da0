import numpy as np
import pytest

from switchmc.rng import CounterNoise, SeedStackNoise, noise_for, parse_rng_key

KEY = "9f3a6c1e5b2d4f708192a3b4c5d6e7f80112233445566778899aabbccddeeff0"


def test_noise_for_is_deterministic():
    a = noise_for(0, 0, KEY, dim=3)
    b = noise_for(0, 0, KEY, dim=3)
    assert np.array_equal(a, b)


def test_noise_for_separates_paths_and_steps():
    assert not np.array_equal(noise_for(0, 0, KEY, dim=2), noise_for(0, 1, KEY, dim=2))
    assert not np.array_equal(noise_for(0, 0, KEY, dim=2), noise_for(1, 0, KEY, dim=2))


def test_block_rows_match_random_access():
    src = CounterNoise(KEY, dim=4)
    block = src.forward_block(step=11, n_paths=50)
    for p in (0, 1, 17, 49):
        assert np.array_equal(block[p], src.vector(11, p))


def test_forward_and_replay_blocks_identical():
    src = CounterNoise(KEY, dim=2)
    a = src.forward_block(3, 100)
    b = src.replay_block(3, 100)
    assert np.array_equal(a, b)


def test_standard_normal_moments():
    # 1e6 draws: mean within 4/sqrt(n), variance within 4*sqrt(2/n).
    src = CounterNoise(KEY, dim=1)
    z = src.forward_block(0, 1_000_000).ravel()
    n = z.size
    assert abs(z.mean()) <= 4.0 / np.sqrt(n)
    assert abs(z.var() - 1.0) <= 4.0 * np.sqrt(2.0 / n)


def test_seedstack_replay_reproduces_forward_draws():
    src = SeedStackNoise(KEY, dim=2)
    fwd = [src.forward_block(i, 40) for i in range(5)]
    for i in (4, 2, 0, 3, 1):
        assert np.array_equal(src.replay_block(i, 40), fwd[i])


def test_seedstack_requires_forward_first():
    src = SeedStackNoise(KEY, dim=1)
    with pytest.raises(KeyError):
        src.replay_block(0, 10)


def test_parse_key_accepts_int_and_hex():
    assert parse_rng_key(255) == parse_rng_key("ff") == parse_rng_key("0xFF")
    with pytest.raises(ValueError):
        parse_rng_key(-1)
    with pytest.raises(TypeError):
        parse_rng_key(1.5)
