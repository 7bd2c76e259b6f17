"""
Setup script for avt-anticipation - anticipative video transformer toolkit
"""

from setuptools import setup, find_packages
from pathlib import Path

# Read README for long description
this_directory = Path(__file__).parent
long_description = (this_directory / "README.md").read_text(encoding='utf-8')

# Read requirements (runtime section only; the dev section starts at its header comment)
requirements = []
requirements_path = this_directory / "requirements.txt"
if requirements_path.exists():
    with open(requirements_path, 'r', encoding='utf-8') as f:
        for line in f:
            line = line.strip()
            if line.startswith('# Development'):
                break
            if line and not line.startswith('#'):
                requirements.append(line)

setup(
    name="avt-anticipation",
    version="1.0.0",
    description="Anticipative video transformer: causal next-action anticipation on a numpy autograd core",
    long_description=long_description,
    long_description_content_type="text/markdown",

    py_modules=[
        "commands",
        "config",
        "data",
        "errors",
        "evaluation",
        "experiments",
        "objectives",
        "rollout",
        "run",
        "schema",
        "training",
        "utils",
    ],
    packages=find_packages(exclude=["tests", "examples", "examples.*"]),
    classifiers=[
        "Development Status :: 4 - Beta",
        "Intended Audience :: Science/Research",
        "License :: OSI Approved :: MIT License",
        "Operating System :: OS Independent",
        "Programming Language :: Python :: 3",
        "Programming Language :: Python :: 3.9",
        "Programming Language :: Python :: 3.10",
        "Programming Language :: Python :: 3.11",
        "Topic :: Scientific/Engineering :: Artificial Intelligence",
    ],

    python_requires=">=3.9",
    install_requires=requirements,

    extras_require={
        "dev": [
            "pytest>=7.0.0",
            "black>=23.0.0",
            "flake8>=6.0.0",
        ],
    },

    entry_points={
        "console_scripts": [
            "avt=run:main",
        ],
    },

    include_package_data=True,
    data_files=[("configs", ["configs/avt-tiny.cfg", "configs/avt-b.cfg", "configs/fixed-features.cfg"])],

    keywords=[
        "action-anticipation",
        "transformer",
        "video",
        "autograd",
        "numpy",
    ],
)
