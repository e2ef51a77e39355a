try:
    from setuptools import setup
except ImportError:
    from distutils.core import setup


def readme():
    with open('README.md') as f:
        return f.read()


config = {
    'name': 'pyslim',
    'description': 'Sequential recommendation with distilled LLM rationales',
    'long_description': readme(),

    'version': '0.0.1',
    'license': 'GPL3',

    'packages': ['pyslim', 'pyslim.configs'],
    'package_data': {'pyslim': ['templates/*.txt']},
    'install_requires': ['numpy', 'Pillow', 'httpx'],
    'keywords': 'recommendation sequential distillation rationale',

    'entry_points': {'console_scripts': ['slim=pyslim.cli:run']},
    'scripts': ['bin/slim.py'],

    'test_suite': 'nose.collector',
    'tests_require': ['nose'],

    'include_package_data': True,
    'zip_safe': False,
}

setup(**config)
