#!/usr/bin/env python

import setuptools, sys

requires = [
      'numpy>=1.20',
      'scipy>=1.6',
      'pandas>=1.5'
]
if sys.version_info.major == 3:
    requires.extend(['doxypypy','pytest','pytest-cov'])
    
setuptools.setup(name='Twincher',
      version='1.0',
      description='Bijective representation learning for black-box inverse problems: invertible Twincher transforms, harmonic entangler benchmarks and Gauss-Newton refinement.',
      packages=setuptools.find_packages(exclude=['test','test.*']),
      include_package_data=True,
      install_requires = requires,
      entry_points = {'console_scripts': ['twincher=Twincher.cli:main']}
)
