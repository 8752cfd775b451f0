import numpy as np

from branchlil.rng import draw, mix64, nb_uniform, stream_key, stream_keys, to_unit

# SplitMix64 reference output for seed 1234567
REFERENCE = [6457827717110365317, 3203168211198807973, 9817491932198370423, 4593380528125082431, 16408922859458223821]


def test_reference_vectors():
    assert [draw(1234567, i) for i in range(5)] == REFERENCE


def test_numba_matches_python():
    key = stream_key(99, 3)
    for i in (0, 1, 17, 10**6):
        assert nb_uniform(np.uint64(key), np.uint64(i)) == to_unit(draw(key, i))


def test_unit_interval():
    u = [to_unit(draw(5, i)) for i in range(2000)]
    assert min(u) >= 0 and max(u) < 1
    assert abs(np.mean(u) - 0.5) < 0.03


def test_stream_keys_distinct():
    keys = stream_keys(42, 1000)
    assert len(set(keys.tolist())) == 1000
    assert int(keys[7]) == stream_key(42, 7)
    assert mix64(0) == 0
