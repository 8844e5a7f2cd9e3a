import pytest

from infersim.hardware import DeviceSpec, LinkSpec, MemoryTier, build_topology


def make_device(sm_count=8, mem_bytes=16e9, mem_bw=1e12, peak=100e12, overhead=5e-6):
    return DeviceSpec(
        mem_bytes=mem_bytes,
        mem_bw=mem_bw,
        peak_flops_by_dtype={"int8": 2 * peak, "fp16": peak, "fp32": peak / 4},
        sm_count=sm_count,
        kernel_launch_overhead=overhead,
    )


def make_topology(nodes=1, gpus=8, pcie_bw=10e9, pcie_lat=0.0, **device_kw):
    """Round-number cluster: 100 GB/s / 1 us inside a node, 10 GB/s / 10 us across."""
    return build_topology(
        nodes,
        gpus,
        make_device(**device_kw),
        LinkSpec(100e9, 1e-6, "intra_node"),
        LinkSpec(10e9, 10e-6, "inter_node"),
        LinkSpec(pcie_bw, pcie_lat, "pcie"),
        tiers={"DRAM": MemoryTier(64e9, 20e9), "NVMe": MemoryTier(1e12, 5e9)},
        name="toy",
    )


@pytest.fixture
def toy():
    return make_topology()


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
