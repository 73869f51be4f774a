"""Error statistics and image renderings of sketching versus masking."""

from ropim.analysis.errors import (CSV_HEADER, METHODS, ErrorStudy, error_study,
                                   image_token_errors, read_csv, token_errors)
from ropim.analysis.ppm import minmax_map, quantize, read_ppm, to_rgb, write_ppm
from ropim.analysis.visualize import (Rendered, figure_panel, l1, reconstruct_demo,
                                      sketch_views, visualize)

__all__ = [
    "CSV_HEADER", "METHODS", "ErrorStudy", "Rendered", "error_study", "figure_panel",
    "image_token_errors", "l1", "minmax_map", "quantize", "read_csv", "read_ppm",
    "reconstruct_demo", "sketch_views", "to_rgb", "token_errors", "visualize", "write_ppm",
]
