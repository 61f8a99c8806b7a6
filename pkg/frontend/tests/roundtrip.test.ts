import { describe, expect, it } from 'vitest';

import { ApiClient, VersionConflictError } from '../src/api.js';
import { AnnotationSession } from '../src/session.js';
import type { KeypointKind } from '../src/types.js';
import { Viewport } from '../src/viewport.js';
import { FakeServer } from './fakeserver.js';

/** The full annotation acceptance flow: clicks at known screen positions
 *  across several zoom levels must land on the server within 0.5 px of the
 *  intended image positions, and a version conflict must keep local edits. */
describe('annotation round trip through the UI layer', () => {
  it('places 20 keypoints across zoom levels, saves, reloads within 0.5 px', async () => {
    const server = new FakeServer();
    server.addImage('fundus', 640, 480);
    const api = new ApiClient(server.fetch);
    const session = await AnnotationSession.load(api, 'fundus');
    const vp = new Viewport();
    const kinds: KeypointKind[] = ['bifurcation', 'crossover', 'intersection'];

    const intended: { x: number; y: number }[] = [];
    const zooms = [0.25, 0.5, 1, 2, 4, 8];
    for (let i = 0; i < 20; i++) {
      const zoom = zooms[i % zooms.length];
      vp.zoom = zoom;
      vp.panX = 13.5 * i - 40;
      vp.panY = -7.25 * i + 30;
      const target = { x: 17 + 29.3 * (i % 7), y: 11 + 23.7 * (i % 9) };
      // the UI receives a screen click and inverts the viewport transform
      const click = vp.imageToScreen(target);
      const imagePos = vp.screenToImage(click);
      expect(session.place(imagePos.x, imagePos.y, kinds[i % 3])).toBe(true);
      intended.push(target);
    }
    await session.save(api);

    const reloaded = await AnnotationSession.load(api, 'fundus');
    expect(reloaded.keypoints).toHaveLength(20);
    reloaded.keypoints.forEach((k, i) => {
      expect(Math.abs(k.x - intended[i].x)).toBeLessThanOrEqual(0.5);
      expect(Math.abs(k.y - intended[i].y)).toBeLessThanOrEqual(0.5);
      expect(k.kind).toBe(kinds[i % 3]);
    });
  });

  it('version conflict returns 409 and loses no local edits', async () => {
    const server = new FakeServer();
    server.addImage('fundus', 320, 240);
    const api = new ApiClient(server.fetch);

    const mine = await AnnotationSession.load(api, 'fundus');
    const theirs = await AnnotationSession.load(api, 'fundus');
    theirs.place(1, 1, 'bifurcation');
    await theirs.save(api);  // bumps the server to version 1

    mine.place(100, 100, 'crossover');
    mine.place(200.5, 120.25, 'intersection');
    const before = JSON.stringify(mine.keypoints);

    await expect(mine.save(api)).rejects.toThrow(VersionConflictError);
    expect(JSON.stringify(mine.keypoints)).toBe(before);  // nothing lost
    expect(mine.dirty).toBe(true);
    expect(server.annotations.get('fundus')?.keypoints).toHaveLength(1);

    // after adopting the server version the same edits save cleanly
    mine.version = (await api.getAnnotations('fundus')).version;
    await mine.save(api);
    expect(server.annotations.get('fundus')?.keypoints).toHaveLength(2);
  });

  it('server rejects a forged out-of-bounds doc with a field path', async () => {
    const server = new FakeServer();
    server.addImage('fundus', 100, 100);
    const api = new ApiClient(server.fetch);
    const session = await AnnotationSession.load(api, 'fundus');
    session.place(50, 50, 'bifurcation');
    // bypass the session guards to prove the server still validates
    session.keypoints[0].x = 500;
    await expect(session.save(api)).rejects.toThrow(/keypoints\[0\]\.x/);
  });
});
