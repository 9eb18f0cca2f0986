import pytest

from sdrob import Config, Runtime

SMALL = dict(stack_size=65536, heap_size=256 * 1024)


@pytest.fixture
def make_runtime():
    """Factory for throwaway runtimes; closes them after the test."""
    made = []

    def factory(backend="audit", **overrides):
        opts = dict(SMALL)
        opts.update(overrides)
        rt = Runtime(Config(backend=backend, **opts))
        made.append(rt)
        return rt

    yield factory
    for rt in made:
        rt.close()


@pytest.fixture
def rt(make_runtime):
    return make_runtime("audit")


@pytest.fixture(params=["audit", "paging"])
def rt_any(request, make_runtime):
    """Both enforcing flavors available in this environment."""
    return make_runtime(request.param)
