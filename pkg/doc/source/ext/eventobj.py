"""Sphinx support for documenting :class:`pydispatch.Dispatcher` events

Adds a ``py:event`` directive (rendered like a method, prefixed with
``event``) and a matching ``:event:`` cross-reference role.
"""
from docutils import nodes
from sphinx import addnodes
from sphinx.domains.python import PyMethod, PyXRefRole


class EventDirective(PyMethod):
    """Documents an event emitted by a Dispatcher subclass, such as
    ``on_step`` or ``on_origin``
    """
    def get_signature_prefix(self, sig):
        return [nodes.Text('event'), addnodes.desc_sig_space()]

    def needs_arglist(self):
        return True


def setup(app):
    app.add_directive_to_domain('py', 'event', EventDirective)
    app.add_role_to_domain('py', 'event', PyXRefRole())
    return {
        'version': '0.2',
        'parallel_read_safe': True,
        'parallel_write_safe': True,
    }
