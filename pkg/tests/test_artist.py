import numpy as np

from lingrid.artist import convergence_plot, heatmap_overlay, minwhere


def test_minwhere():
    assert minwhere([3.0, 1.0, 2.0, 1.0]) == (1, 1.0)


def test_convergence_plot(tmp_path):
    zeros = {"L_dis": 0.0, "L_rec": 0.0, "L_rank": 0.0}
    rows = [
        {"total": 3.0 - 0.1 * i, "L_I": 2.0, "L_T": 1.0 - 0.1 * i, **zeros} for i in range(5)
    ]
    figname = tmp_path / "loss.png"
    convergence_plot(rows, figname=figname)
    assert figname.read_bytes().startswith(b"\x89PNG")


def test_heatmap_overlay(tmp_path):
    image = np.random.default_rng(0).uniform(size=(64, 32, 3))
    grid = np.zeros((64, 32))
    grid[16:32] = 1.0
    figname = tmp_path / "overlay.png"
    heatmap_overlay(image, grid, figname, title="a blue shirt")
    assert figname.stat().st_size > 0
