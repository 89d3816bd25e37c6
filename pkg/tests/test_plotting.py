from PIL import Image

from surfelsplat.plotting import plot_loss_curves, plot_noise_ablation


def test_loss_curves(tmp_path):
    log = []
    for i in range(120):
        stage = 1 if i < 80 else 2
        log.append({"iteration": i + 1, "stage": stage, "depth": 1e-3 / (i + 1), "normal": 0.1, "color": 1 / (i + 2),
                    "silhouette": 0.01, "binding": 0.0, "total": 2 / (i + 2)})
    p = plot_loss_curves(log, tmp_path / "c.png", window=10)
    with Image.open(p) as im:
        assert im.size[0] > 500


def test_noise_plot(tmp_path):
    table = [{"std": s, "psnr": 36 - 5 * s, "psnr_sd": 0.1, "ssim": 0.98 - s / 10} for s in (0, 0.05, 0.1, 0.2)]
    assert plot_noise_ablation(table, tmp_path / "n.png").stat().st_size > 0
