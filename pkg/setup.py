from setuptools import setup

# Metadata goes in setup.cfg. These are here for GitHub's dependency graph.
setup(
    name="RoomDistill",
    install_requires=[
        "cachelib >= 0.9.0",
        "click >= 8.0",
        "numpy >= 1.22",
        "pillow >= 9.1",
        "scipy >= 1.8",
        "torch >= 2.0",
        "werkzeug >= 2.2",
    ],
)
