# WSS3D Toolkit
# Licensed under the GNU General Public License v3.0 [see LICENSE for details]

__version__ = '0.1.0'
