/**
 * Wire protocol of the embedded-runtime host: newline-delimited JSON over
 * stdio. Binary values travel base64-encoded so any byte sequence survives
 * the boundary unchanged.
 *
 * Requests:
 *   {id, op: "ping"}
 *   {id, op: "load", path}                         -> {id, ok, script}
 *   {id, op: "transform", script, dir, key, value} -> {id, ok, value}
 *   {id, op: "shutdown"}
 *
 * Every request gets exactly one response line; failures respond with
 * {id, ok: false, error} and never terminate the host.
 */

export const PROTOCOL_VERSION = 1;

export type TransformDirection = "put" | "get";

export interface Request {
  id: number;
  op: "ping" | "load" | "transform" | "shutdown";
  path?: string;
  script?: number;
  dir?: TransformDirection;
  key?: string; // base64
  value?: string; // base64
}

export interface Response {
  id?: number;
  ok: boolean;
  version?: number;
  script?: number;
  value?: string; // base64
  error?: string;
}

/** A loaded transform script: both directions must be functions. */
export interface TransformModule {
  transform_put(key: Uint8Array, value: Uint8Array): Uint8Array;
  transform_get(key: Uint8Array, value: Uint8Array): Uint8Array;
}
