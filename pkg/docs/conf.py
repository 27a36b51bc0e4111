#
# RoomDistill documentation build configuration file.
#
# This file is execfile()d with the current directory set to its
# containing dir.
#
import alabaster

from roomdistill import __version__

# -- General configuration ------------------------------------------------

extensions = [
    "sphinx.ext.autodoc",
    "sphinx.ext.intersphinx",
]

templates_path = ["_templates"]
source_suffix = ".rst"
master_doc = "index"

project = "RoomDistill"
copyright = "2024, the RoomDistill authors"
author = "the RoomDistill authors"

# The short X.Y version.
version = ".".join(__version__.split(".")[:2])
# The full version, including alpha/beta/rc tags.
release = __version__

language = "en"
exclude_patterns = ["_build"]
pygments_style = "sphinx"
autodoc_member_order = "bysource"

intersphinx_mapping = {
    "python": ("https://docs.python.org/3", None),
    "numpy": ("https://numpy.org/doc/stable/", None),
    "torch": ("https://pytorch.org/docs/stable/", None),
    "cachelib": ("https://cachelib.readthedocs.io/en/stable/", None),
}

# -- Options for HTML output ----------------------------------------------

html_theme = "alabaster"
html_theme_options = {
    "description": "Progressive-view score distillation of room-scale "
    "radiance fields.",
}
html_theme_path = [alabaster.get_path()]
html_static_path = []
htmlhelp_basename = "RoomDistilldoc"

# -- Options for manual page output ---------------------------------------

man_pages = [(master_doc, "roomdistill", "RoomDistill Documentation", [author], 1)]
