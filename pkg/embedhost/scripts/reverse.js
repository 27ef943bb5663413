// Store values byte-reversed; reversing again on the way out restores them.
function reversed(value) {
  return Uint8Array.from(value).reverse();
}
module.exports.transform_put = (key, value) => reversed(value);
module.exports.transform_get = (key, value) => reversed(value);
