// Pass values through unchanged in both directions.
module.exports.transform_put = (key, value) => value;
module.exports.transform_get = (key, value) => value;
