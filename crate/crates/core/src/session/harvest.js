(() => {
  const TEXT_CAP = 300;
  const CANDIDATES = 'a, button, input, textarea, select, [role], [tabindex], [onclick]';
  const IMPLICIT_ROLES = { a: 'link', button: 'button', textarea: 'textbox', select: 'combobox' };
  const INPUT_ROLES = {
    button: 'button', submit: 'button', reset: 'button', image: 'button',
    checkbox: 'checkbox', radio: 'radio', range: 'slider', search: 'searchbox',
  };

  const clean = (s) => (s || '').replace(/\s+/g, ' ').trim();

  const role = (el) => {
    const explicit = clean(el.getAttribute('role'));
    if (explicit) return explicit.split(' ')[0];
    const tag = el.tagName.toLowerCase();
    if (tag === 'input') return INPUT_ROLES[(el.type || 'text').toLowerCase()] || 'textbox';
    if (tag === 'a') return el.hasAttribute('href') ? 'link' : '';
    return IMPLICIT_ROLES[tag] || '';
  };

  // aria-label, then associated labels, then value/alt/title, then inner text
  const accessibleName = (el) => {
    const aria = clean(el.getAttribute('aria-label'));
    if (aria) return aria;
    const labelledBy = clean(el.getAttribute('aria-labelledby'));
    if (labelledBy) {
      const text = labelledBy.split(' ')
        .map((id) => document.getElementById(id))
        .filter(Boolean)
        .map((n) => clean(n.textContent))
        .join(' ');
      if (text) return text;
    }
    if (el.labels && el.labels.length) {
      const text = clean(Array.from(el.labels).map((l) => l.textContent).join(' '));
      if (text) return text;
    }
    for (const attr of ['value', 'alt', 'title']) {
      const v = clean(el.getAttribute(attr));
      if (v) return v;
    }
    return clean(el.innerText).slice(0, TEXT_CAP);
  };

  const hidden = (el) => {
    const style = window.getComputedStyle(el);
    return style.display === 'none' || style.visibility === 'hidden' ||
      style.visibility === 'collapse' || el.hidden === true ||
      el.getAttribute('aria-hidden') === 'true' || el.getClientRects().length === 0;
  };

  const editable = (el) => {
    const tag = el.tagName.toLowerCase();
    if (el.isContentEditable) return true;
    if (tag === 'textarea') return !el.readOnly && !el.disabled;
    if (tag === 'input') {
      const t = (el.type || 'text').toLowerCase();
      return !['button', 'submit', 'reset', 'image', 'checkbox', 'radio', 'range', 'color', 'file', 'hidden'].includes(t) &&
        !el.readOnly && !el.disabled;
    }
    return false;
  };

  const nodes = [];
  for (const el of document.querySelectorAll(CANDIDATES)) {
    const r = el.getBoundingClientRect();
    const tabindexAttr = el.getAttribute('tabindex');
    const tabindex = tabindexAttr === null ? null : parseInt(tabindexAttr, 10);
    const node = {
      tag_name: el.tagName.toLowerCase(),
      accessible_name: accessibleName(el),
      aria_role: role(el),
      dom_id: el.id || '',
      css_class: typeof el.className === 'string' ? clean(el.className) : '',
      text: clean(el.innerText).slice(0, TEXT_CAP),
      box: { x: r.left + window.scrollX, y: r.top + window.scrollY, height: r.height, width: r.width },
      hidden: hidden(el),
      has_click_handler: typeof el.onclick === 'function' || el.hasAttribute('onclick'),
      editable: editable(el),
    };
    if (tabindex !== null && !Number.isNaN(tabindex)) node.tabindex = tabindex;
    nodes.push(node);
  }
  return {
    url: location.href,
    viewport: { width: window.innerWidth, height: window.innerHeight },
    scroll: { x: window.scrollX, y: window.scrollY },
    nodes,
  };
})()
