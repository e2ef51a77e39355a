from PIL import Image, ImageDraw


PLOT_SIZE = (800, 400)
PLOT_MARGIN = 40

BACKGROUND_COLOR = (255, 255, 255)
AXIS_COLOR = (0, 0, 0)
TRAIN_COLOR = (31, 119, 180)
RECOMMENDED_COLOR = (214, 39, 40)


def build_color_image(size, color):
    return Image.new('RGB', size, color)


def normalize_series(values):
    peak = max(values) if values else 0
    if peak <= 0:
        return [0.0] * len(values)
    return [value / peak for value in values]


def series_points(values, box):
    left, top, right, bottom = box
    count = len(values)
    span = max(1, count - 1)
    points = []
    for index, value in enumerate(values):
        x = left + (right - left) * index / span
        y = bottom - (bottom - top) * value
        points.append((x, y))
    return points


def render_popularity_plot(report, path, size=PLOT_SIZE, margin=PLOT_MARGIN):
    """Draws train and top-K frequencies per item, items ordered by train frequency."""
    image = build_color_image(size, BACKGROUND_COLOR)
    draw = ImageDraw.Draw(image)
    box = (margin, margin, size[0] - margin, size[1] - margin)

    draw.line([(box[0], box[1]), (box[0], box[3]), (box[2], box[3])], fill=AXIS_COLOR, width=1)

    series = (
        ('train', [row.train_count for row in report.rows], TRAIN_COLOR),
        ('top-{}'.format(report.k), [row.rec_count for row in report.rows], RECOMMENDED_COLOR),
    )
    for index, (label, values, color) in enumerate(series):
        points = series_points(normalize_series(values), box)
        if len(points) > 1:
            draw.line(points, fill=color, width=2)
        elif points:
            draw.point(points, fill=color)
        draw.text((box[2] - 120, box[1] + 14 * index), label, fill=color)

    caption = 'items: {}  users: {}  EFD@{k}: {:.4f}  EPC@{k}: {:.4f}'.format(
        len(report.rows), report.n_users, report.efd, report.epc, k=report.k)
    draw.text((box[0], size[1] - margin + 10), caption, fill=AXIS_COLOR)

    image.save(path, format='PNG')
    return image
