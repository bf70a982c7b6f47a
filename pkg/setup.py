from setuptools import find_packages, setup

setup(
    name="specdraft",
    version="0.1",
    description="Desk-scale speculative decoding with multi-layer draft heads and adversarial distillation.",
    install_requires=[],
    setup_requires=[],
    packages=find_packages(exclude=["examples", "tests"]),
    entry_points="""
        [console_scripts]
        specdraft=specdraft.cli.main:app
    """,
)
