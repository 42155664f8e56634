# WSS3D Toolkit
# Licensed under the GNU General Public License v3.0 [see LICENSE for details]

from setuptools import find_packages, setup

setup(
    name='wss3d-toolkit',
    version='0.1.0',
    packages=find_packages(include=['wss3d_toolkit', 'wss3d_toolkit.*']),
    install_requires=[
        'numpy',
        'matplotlib',
        'pyyaml',
        'scipy',
        'tabulate',
        'torch',
        'tqdm',
    ],
    extras_require={
        'test': ['pytest'],
    },
    entry_points={
        'console_scripts': ['wss3d=wss3d_toolkit.cli:main'],
    },
)
