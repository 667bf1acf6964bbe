# bnexpand documentation build configuration file.
#
# This file is execfile()d with the current directory set to its containing dir.

import sys, os

# If extensions (or modules to document with autodoc) are in another directory,
# add these directories to sys.path here.
sys.path.insert(0, os.path.abspath('..'))

# -- General configuration -----------------------------------------------------

extensions = ['sphinx.ext.autodoc',
              'sphinx.ext.todo',
              'sphinx.ext.intersphinx',
              'sphinx.ext.doctest']

templates_path = ['_templates']

source_suffix = '.rst'

master_doc = 'index'

# General information about the project.
project = 'bnexpand'
copyright = '2026 bnexpand authors and contributors'

# The short X.Y version.
version = '0.1'
# The full version, including alpha/beta/rc tags.
release = '0.1.0'

exclude_patterns = ['_build']

pygments_style = 'sphinx'


# -- Options for HTML output ---------------------------------------------------

try:
    import sphinx_rtd_theme
except ImportError:
    html_theme = 'classic'
else:
    html_theme_path = [sphinx_rtd_theme.get_html_theme_path()]
    html_theme = 'sphinx_rtd_theme'

htmlhelp_basename = 'bnexpanddoc'


# -- Extensions ----------------------------------------------------------------

intersphinx_mapping = {
    'python': ('https://docs.python.org/3', None),
    'numpy': ('https://numpy.org/doc/stable', None),
}

autodoc_member_order = 'bysource'

todo_include_todos = True
