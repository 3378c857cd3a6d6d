from setuptools import find_packages, setup

setup(
    name="mdlm-lab",
    version="0.1.0",
    packages=find_packages(exclude=["tests", "tests.*"]),
    python_requires=">=3.10",
    install_requires=[
        "numpy>=1.24",
        "pydantic>=2.4.2,<3.0.0",
        "environs>=9.5.0,<10.0.0",
        "marshmallow<4",  # environs 9.x reads ma.__version_info__, removed in marshmallow 4
        "matplotlib>=3.7",
    ],
    extras_require={"test": ["pytest>=7"]},
    entry_points={"console_scripts": ["mdlm-lab = mdlm_lab.cli:main"]},
    description="Masked diffusion language model lab: toy corpus, denoisers, samplers and diagnostics",
)
