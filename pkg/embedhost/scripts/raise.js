// Always fails on writes; used to prove failures stay isolated.
module.exports.transform_put = (key, value) => {
  throw new Error("transform_put rejected this value");
};
module.exports.transform_get = (key, value) => value;
