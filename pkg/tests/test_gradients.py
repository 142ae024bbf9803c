import pytest

from gradcheck import block_case, op_cases, unet_case, unet_case_kink_aware

TOL = 1e-5
SEEDS = range(5)


@pytest.mark.parametrize("name", sorted(op_cases()))
def test_op_gradient(name, f64):
    case = op_cases()[name]
    for seed in SEEDS:
        assert case(seed) <= TOL, f"{name} seed {seed}"


@pytest.mark.parametrize("kind", ["se", "me", "sme", "film"])
def test_block_gradient(kind, f64):
    for seed in SEEDS:
        assert block_case(kind)(seed) <= TOL


@pytest.mark.parametrize("kind", ["none", "se", "me", "sme", "film"])
def test_tiny_unet_gradient(kind):
    assert unet_case(kind) <= TOL


def test_kink_aware_check_skips_only_kinks():
    err, checked, skipped = unet_case_kink_aware("none", 0)
    assert err <= TOL and checked > 0 and skipped > 0
